"""Block stores: an in-memory backend and an append-only JSON-lines file.

File format, one document per line, sorted keys, lowercase hex::

    {"h":0,"hash":"…","header":{…},"origin":"m1","payload":"…"}
    {"truncate":3}

A ``truncate`` line is a tombstone: every block above that height is
discarded. Tombstones and a torn trailing line are compacted away the next
time the file is opened.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from circleledger._json import canonical_json
from circleledger.errors import DuplicateHeight, HeightGap, HeightOutOfRange, Malformed
from circleledger.ledger import Block, block_from_doc, block_line


class BlockStore:
    """Height-indexed block storage shared by both backends."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self._blocks: list[Block] = []

    @property
    def tip_height(self) -> int:
        return len(self._blocks) - 1

    def tip(self) -> Block | None:
        return self._blocks[-1] if self._blocks else None

    def get_block(self, height: int) -> Block | None:
        if 0 <= height < len(self._blocks):
            return self._blocks[height]
        return None

    def blocks(self) -> list[Block]:
        return list(self._blocks)

    def put_block(self, block: Block) -> None:
        expected = len(self._blocks)
        if block.height < expected:
            raise DuplicateHeight(f"height {block.height} already stored")
        if block.height > expected:
            raise HeightGap(f"expected height {expected}, got {block.height}")
        self._write(block_line(block))
        self._blocks.append(block)

    def truncate_to(self, height: int) -> None:
        """Drop every block above ``height`` (-1 empties the store)."""
        if not -1 <= height <= self.tip_height:
            raise HeightOutOfRange(f"cannot truncate to {height}, tip is {self.tip_height}")
        if height == self.tip_height:
            return
        self._write(canonical_json({"truncate": height}) + b"\n")
        del self._blocks[height + 1:]

    def reload(self) -> None:
        pass

    def _write(self, line: bytes) -> None:
        pass


class MemoryStore(BlockStore):
    pass


class FileStore(BlockStore):
    def __init__(self, path: str | os.PathLike, node_id: str = ""):
        super().__init__(node_id or Path(path).stem)
        self.path = Path(path)
        self.reload()

    def reload(self) -> None:
        """Re-read the file from disk, compacting tombstones and torn tails."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        raw = self.path.read_bytes() if self.path.exists() else b""
        blocks, dirty = replay_lines(raw)
        self._blocks = blocks
        if dirty:
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_bytes(b"".join(block_line(b) for b in blocks))
            os.replace(tmp, self.path)

    def _write(self, line: bytes) -> None:
        with open(self.path, "ab") as fh:
            fh.write(line)


def split_records(raw: bytes) -> tuple[list[bytes], bool]:
    """Complete lines, plus whether a torn trailing record was dropped."""
    lines = raw.split(b"\n")
    torn = lines[-1] != b""
    return lines[:-1], torn


def parse_record(line: bytes) -> dict:
    try:
        doc = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise Malformed(f"bad JSON: {exc}") from None
    if canonical_json(doc) != line:
        raise Malformed("record is not canonically encoded")
    return doc


def replay_lines(raw: bytes) -> tuple[list[Block], bool]:
    lines, dirty = split_records(raw)
    blocks: list[Block] = []
    for line in lines:
        doc = parse_record(line)
        if set(doc) == {"truncate"}:
            height = doc["truncate"]
            if type(height) is not int or not -1 <= height < len(blocks):
                raise Malformed(f"bad tombstone {line!r}")
            del blocks[height + 1:]
            dirty = True
            continue
        block = block_from_doc(doc)
        if doc["h"] != len(blocks) or block.height != len(blocks):
            raise Malformed(f"record out of order at {len(blocks)}")
        blocks.append(block)
    return blocks, dirty
