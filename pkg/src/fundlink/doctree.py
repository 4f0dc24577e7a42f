"""Tree-structured funding-opportunity documents.

Parses opportunity HTML into a heading-driven tree (the summary is the
root, h2+ headings open sections at their heading level), extracts dated
update entries, and serialises trees to a fixed markdown form that is the
single source of chunk text for retrieval.

The parser is lenient: unknown tags are flattened to text, tables are
flattened row-by-row with cells joined by " | ", and the first definition
list seen before any section heading is captured as the summary-field map
in addition to being flattened into the root's blocks.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from html.parser import HTMLParser

from .errors import MalformedDocument

logger = logging.getLogger(__name__)

PARAGRAPH = "paragraph"
LIST = "list"


@dataclass
class Block:
    """One content block: a paragraph (text is a string) or a list
    (text is the ordered item strings)."""

    kind: str
    text: str | list[str]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(kind=d["kind"], text=d["text"])


@dataclass
class DocNode:
    """A heading-rooted section; children carry strictly larger levels."""

    heading: str
    level: int
    blocks: list[Block] = field(default_factory=list)
    children: list["DocNode"] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "heading": self.heading,
            "level": self.level,
            "blocks": [b.to_dict() for b in self.blocks],
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DocNode":
        return cls(
            heading=d["heading"],
            level=d["level"],
            blocks=[Block.from_dict(b) for b in d.get("blocks", [])],
            children=[cls.from_dict(c) for c in d.get("children", [])],
        )


@dataclass
class UpdateEntry:
    date: date
    text: str

    def to_dict(self) -> dict:
        return {"date": self.date.isoformat(), "text": self.text}

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateEntry":
        return cls(date=date.fromisoformat(d["date"]), text=d["text"])


@dataclass
class OpportunityDoc:
    """A parsed opportunity: summary metadata plus the section tree."""

    opportunity_id: str
    title: str
    summary_fields: dict[str, str]
    root: DocNode
    updates: list[UpdateEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "opportunity_id": self.opportunity_id,
            "title": self.title,
            "summary_fields": self.summary_fields,
            "root": self.root.to_dict(),
            "updates": [u.to_dict() for u in self.updates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpportunityDoc":
        return cls(
            opportunity_id=d["opportunity_id"],
            title=d["title"],
            summary_fields=dict(d.get("summary_fields", {})),
            root=DocNode.from_dict(d["root"]),
            updates=[UpdateEntry.from_dict(u) for u in d.get("updates", [])],
        )


def doc_to_json(doc: OpportunityDoc) -> str:
    """UTF-8 JSON with stable key order (insertion order of to_dict)."""
    return json.dumps(doc.to_dict(), ensure_ascii=False, indent=2)


def doc_from_json(text: str) -> OpportunityDoc:
    return OpportunityDoc.from_dict(json.loads(text))


def iter_nodes(node: DocNode):
    """Yield node and all descendants in depth-first (pre-) order."""
    yield node
    for child in node.children:
        yield from iter_nodes(child)


# ---------------------------------------------------------------------------
# HTML parsing


_SKIP_TAGS = {"script", "style", "noscript", "template"}
# Tags whose boundaries terminate the current paragraph run.
_BLOCK_TAGS = {
    "p", "div", "section", "article", "blockquote", "header", "footer",
    "main", "aside", "figure", "figcaption", "details", "summary", "nav",
    "form", "fieldset", "pre", "address", "hr",
}
_HEADING_TAGS = {"h1": 1, "h2": 2, "h3": 3, "h4": 4, "h5": 5, "h6": 6}


def _normalize(parts: list[str]) -> str:
    return " ".join("".join(parts).split())


class _TreeBuilder(HTMLParser):
    """Event-driven builder: headings open nodes, everything else becomes
    normalized blocks on the innermost open node. Unknown tags are inline."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.root = DocNode(heading="", level=1)
        self.stack = [self.root]
        self.title = ""
        self.summary_fields: dict[str, str] | None = None
        self._root_heading_set = False
        self._seen_section = False
        self._skip_depth = 0
        self._in_title = False
        self._title_buf: list[str] = []
        self._heading_level: int | None = None
        self._heading_buf: list[str] = []
        self._buf: list[str] = []
        # list state: nesting depth shares one item sequence (flattened)
        self._list_depth = 0
        self._list_items: list[str] = []
        self._item_buf: list[str] | None = None
        # table state
        self._table_depth = 0
        self._rows: list[list[str]] = []
        self._cells: list[str] | None = None
        self._cell_buf: list[str] | None = None
        # definition-list state
        self._in_dl = False
        self._dl_pairs: list[tuple[str, str]] = []
        self._dl_role: str | None = None
        self._dl_buf: list[str] = []
        self._dl_key: str = ""

    # -- block emission ----------------------------------------------------

    def _node(self) -> DocNode:
        return self.stack[-1]

    def _flush_paragraph(self) -> None:
        text = _normalize(self._buf)
        self._buf = []
        if text:
            self._node().blocks.append(Block(PARAGRAPH, text))

    def _finish_item(self) -> None:
        if self._item_buf is not None:
            text = _normalize(self._item_buf)
            if text:
                self._list_items.append(text)
            self._item_buf = None

    def _finish_list(self) -> None:
        self._finish_item()
        if self._list_items:
            self._node().blocks.append(Block(LIST, self._list_items))
        self._list_items = []

    def _finish_cell(self) -> None:
        if self._cell_buf is not None and self._cells is not None:
            self._cells.append(_normalize(self._cell_buf))
            self._cell_buf = None

    def _finish_table(self) -> None:
        for row in self._rows:
            text = " | ".join(c for c in row if c)
            if text:
                self._node().blocks.append(Block(PARAGRAPH, text))
        self._rows = []

    def _finish_dl_entry(self) -> None:
        text = _normalize(self._dl_buf)
        self._dl_buf = []
        if self._dl_role == "dt":
            self._dl_key = text
        elif self._dl_role == "dd" and (self._dl_key or text):
            self._dl_pairs.append((self._dl_key, text))
        self._dl_role = None

    def _finish_dl(self) -> None:
        self._finish_dl_entry()
        if self.summary_fields is None and not self._seen_section and self._dl_pairs:
            fields: dict[str, str] = {}
            for key, value in self._dl_pairs:
                key = key.rstrip(":").strip()
                if key and key not in fields:
                    fields[key] = value
            self.summary_fields = fields
        for key, value in self._dl_pairs:
            text = " | ".join(p for p in (key.rstrip(":").strip(), value) if p)
            if text:
                self._node().blocks.append(Block(PARAGRAPH, text))
        self._dl_pairs = []
        self._in_dl = False

    def _open_section(self, level: int, heading: str) -> None:
        if not heading:
            return
        if level == 1 and not self._root_heading_set and not self._seen_section:
            self.root.heading = heading
            self._root_heading_set = True
            return
        level = max(level, 2)  # the root is unique; later h1s open sections
        while self.stack[-1].level >= level:
            self.stack.pop()
        node = DocNode(heading=heading, level=level)
        self.stack[-1].children.append(node)
        self.stack.append(node)
        self._seen_section = True

    # -- parser events -----------------------------------------------------

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            self._skip_depth += 1
            return
        if self._skip_depth:
            return
        if tag == "title":
            self._in_title = True
        elif tag in _HEADING_TAGS:
            self._flush_paragraph()
            if self._list_depth:
                self._finish_list()
                self._list_depth = 0
            self._heading_level = _HEADING_TAGS[tag]
            self._heading_buf = []
        elif tag in ("ul", "ol"):
            if self._list_depth == 0:
                self._flush_paragraph()
            self._list_depth += 1
        elif tag == "li":
            self._finish_item()
            self._item_buf = []
        elif tag == "table":
            self._flush_paragraph()
            self._table_depth += 1
            if self._table_depth == 1:
                self._rows = []
        elif tag == "tr":
            self._cells = []
        elif tag in ("td", "th"):
            self._finish_cell()
            self._cell_buf = []
        elif tag == "dl":
            self._flush_paragraph()
            self._in_dl = True
            self._dl_pairs = []
        elif tag in ("dt", "dd") and self._in_dl:
            self._finish_dl_entry()
            self._dl_role = tag
            self._dl_buf = []
        elif tag == "br":
            self._soft_break()
        elif tag in _BLOCK_TAGS:
            if not (self._item_buf is not None or self._cell_buf is not None
                    or self._dl_role or self._heading_level or self._in_title):
                self._flush_paragraph()
            else:
                self._soft_break()
        # anything else is treated as inline; its text flattens into place

    def handle_startendtag(self, tag, attrs):
        if tag == "br":
            self._soft_break()
        else:
            self.handle_starttag(tag, attrs)

    def _soft_break(self) -> None:
        for buf in (self._cell_buf, self._item_buf):
            if buf is not None:
                buf.append(" ")
                return
        if self._dl_role:
            self._dl_buf.append(" ")
        elif self._heading_level:
            self._heading_buf.append(" ")
        else:
            self._flush_paragraph()

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS:
            self._skip_depth = max(0, self._skip_depth - 1)
            return
        if self._skip_depth:
            return
        if tag == "title":
            if not self.title:
                self.title = _normalize(self._title_buf)
            self._in_title = False
        elif tag in _HEADING_TAGS:
            level = self._heading_level or _HEADING_TAGS[tag]
            heading = _normalize(self._heading_buf)
            self._heading_level = None
            self._heading_buf = []
            self._open_section(level, heading)
        elif tag in ("ul", "ol"):
            if self._list_depth:
                self._list_depth -= 1
                if self._list_depth == 0:
                    self._finish_list()
        elif tag == "li":
            self._finish_item()
        elif tag in ("td", "th"):
            self._finish_cell()
        elif tag == "tr":
            self._finish_cell()
            if self._cells:
                self._rows.append(self._cells)
            self._cells = None
        elif tag == "table":
            if self._table_depth:
                self._table_depth -= 1
                if self._table_depth == 0:
                    self._finish_table()
        elif tag in ("dt", "dd") and self._in_dl:
            self._finish_dl_entry()
        elif tag == "dl":
            if self._in_dl:
                self._finish_dl()
        elif tag in _BLOCK_TAGS:
            if not (self._item_buf is not None or self._cell_buf is not None
                    or self._dl_role or self._heading_level or self._in_title):
                self._flush_paragraph()
            else:
                self._soft_break()

    def handle_data(self, data):
        if self._skip_depth:
            return
        if self._in_title:
            self._title_buf.append(data)
        elif self._heading_level:
            self._heading_buf.append(data)
        elif self._cell_buf is not None:
            self._cell_buf.append(data)
        elif self._dl_role:
            self._dl_buf.append(data)
        elif self._item_buf is not None:
            self._item_buf.append(data)
        else:
            self._buf.append(data)

    def finish(self) -> None:
        self.close()
        if self._heading_level:
            level = self._heading_level
            self._heading_level = None
            self._open_section(level, _normalize(self._heading_buf))
        self._finish_cell()
        if self._cells:
            self._rows.append(self._cells)
            self._cells = None
        self._finish_table()
        if self._in_dl:
            self._finish_dl()
        self._finish_list()
        self._list_depth = 0
        self._flush_paragraph()
        if not self.root.heading:
            self.root.heading = self.title


def _build_tree(html: str) -> _TreeBuilder:
    builder = _TreeBuilder()
    builder.feed(html)
    builder.finish()
    return builder


def parse_opportunity_html(html: str, opportunity_id: str,
                           warnings: list[str] | None = None) -> OpportunityDoc:
    """Parse opportunity HTML into an OpportunityDoc.

    The first h1 (falling back to <title>) names the document; h2..h6 open
    sections whose levels follow the heading levels. Raises
    MalformedDocument when neither a title nor any body content exists.
    Unparseable update dates are skipped and appended to ``warnings``.
    """
    if not opportunity_id:
        raise ValueError("opportunity_id must be non-empty")
    builder = _build_tree(html)
    root = builder.root
    title = root.heading or builder.title
    if not title and not root.blocks and not root.children:
        raise MalformedDocument(f"{opportunity_id}: no recognizable body content")
    root.heading = title
    updates = _updates_from_tree(root, warnings)
    return OpportunityDoc(
        opportunity_id=opportunity_id,
        title=title,
        summary_fields=builder.summary_fields or {},
        root=root,
        updates=updates,
    )


_UPDATE_DATE_FORMATS = ("%d %B %Y", "%Y-%m-%d")


def _parse_update_date(text: str) -> date | None:
    text = text.strip()
    for fmt in _UPDATE_DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    return None


def _block_texts(node: DocNode) -> list[str]:
    texts: list[str] = []
    for n in iter_nodes(node):
        for block in n.blocks:
            if block.kind == LIST:
                texts.extend(block.text)
            else:
                texts.append(block.text)
    return texts


def _updates_from_tree(root: DocNode, warnings: list[str] | None) -> list[UpdateEntry]:
    entries: list[UpdateEntry] = []
    for node in iter_nodes(root):
        heading = node.heading.strip().lower()
        if heading not in ("update", "updates"):
            continue
        for child in node.children:
            parsed = _parse_update_date(child.heading)
            text = " ".join(_block_texts(child))
            if parsed is None or not text:
                message = f"skipped update entry with heading {child.heading!r}"
                logger.warning(message)
                if warnings is not None:
                    warnings.append(message)
                continue
            entries.append(UpdateEntry(date=parsed, text=text))
    return entries


def extract_updates(html: str, warnings: list[str] | None = None) -> list[UpdateEntry]:
    """Extract dated update entries (source order); never raises."""
    builder = _build_tree(html)
    return _updates_from_tree(builder.root, warnings)


# ---------------------------------------------------------------------------
# Markdown serialization


def _render_block(block: Block) -> str:
    if block.kind == LIST:
        return "\n".join(f"- {item}" for item in block.text)
    return str(block.text)


def serialize_markdown(node: DocNode) -> str:
    """Render a node and its subtree: L-level headings get L hashes,
    blocks are separated by blank lines, list items get "- " prefixes,
    children render depth-first. Deterministic byte-for-byte."""
    parts = [f"{'#' * node.level} {node.heading}".rstrip()]
    parts.extend(_render_block(b) for b in node.blocks)
    parts.extend(serialize_markdown(c) for c in node.children)
    return "\n\n".join(parts)


def node_text(node: DocNode) -> str:
    """Chunk text for a node: its heading plus all descendant content."""
    return serialize_markdown(node)


_MD_HEADING = re.compile(r"^(#{1,6})(?:\s+(.*))?$")


def parse_markdown(md: str) -> DocNode:
    """Inverse of serialize_markdown for trees it produced.

    Paragraph text that itself starts with heading or list markers is
    indistinguishable from structure; the parser trees such text as
    structure.
    """
    root: DocNode | None = None
    stack: list[DocNode] = []
    items: list[str] | None = None

    def current() -> DocNode:
        nonlocal root
        if root is None:
            root = DocNode(heading="", level=1)
            stack.append(root)
        return stack[-1]

    def close_list() -> None:
        nonlocal items
        if items:
            current().blocks.append(Block(LIST, items))
        items = None

    for line in md.split("\n"):
        if not line.strip():
            close_list()
            continue
        m = _MD_HEADING.match(line)
        if m:
            close_list()
            level = len(m.group(1))
            heading = (m.group(2) or "").strip()
            if root is None:
                root = DocNode(heading=heading, level=level or 1)
                stack.append(root)
            else:
                while stack and stack[-1].level >= level:
                    stack.pop()
                node = DocNode(heading=heading, level=level)
                (stack[-1] if stack else root).children.append(node)
                stack.append(node)
        elif line.startswith("- "):
            if items is None:
                items = []
            items.append(line[2:])
        else:
            close_list()
            current().blocks.append(Block(PARAGRAPH, line))
    close_list()
    return root if root is not None else DocNode(heading="", level=1)
