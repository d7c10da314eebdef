"""Strong, sequential and weak labels and their text file formats.

A sequential label is the time-ordered list of event boundaries of a clip,
each written as ``<class>_start`` or ``<class>_end``, with no timestamps.
Token ids follow the :class:`ClassTable` layout: ``2k`` is the start of class
``k``, ``2k + 1`` its end and ``2K`` the CTC blank.
"""

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidStrongLabel, LabelParseError

_START = "_start"
_END = "_end"


class ClassTable:
    """Ordered class names and the token alphabet derived from them."""

    def __init__(self, names):
        names = list(names)
        if not names or any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        self.names = names
        self._index = {n: k for k, n in enumerate(names)}
        self._tokens = {}
        for k, n in enumerate(names):
            self._tokens[n + _START] = 2 * k
            self._tokens[n + _END] = 2 * k + 1

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, ClassTable) and self.names == other.names

    def __repr__(self):
        return f"ClassTable({self.names!r})"

    @property
    def n_tokens(self):
        return 2 * len(self.names) + 1

    @property
    def blank(self):
        return 2 * len(self.names)

    def index(self, name):
        return self._index[name]

    def start(self, k):
        return 2 * k

    def end(self, k):
        return 2 * k + 1

    def token_id(self, name):
        return self._tokens[name]

    def token_name(self, tok):
        if tok == self.blank:
            return "blank"
        suffix = _START if tok % 2 == 0 else _END
        return self.names[tok // 2] + suffix

    def token_names(self):
        return [self.token_name(t) for t in range(self.n_tokens)]

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.strip() for line in lines if line.strip())

    def to_file(self, path):
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


def is_start(tok):
    return tok % 2 == 0


def token_class(tok):
    return tok // 2


@dataclass(frozen=True)
class StrongLabel:
    cls: int
    onset: float
    offset: float


def check_strong(labels, n_classes, clip_seconds=None):
    """Raise :class:`InvalidStrongLabel` unless ``labels`` are usable."""
    by_class = defaultdict(list)
    for lab in labels:
        if not 0 <= lab.cls < n_classes:
            raise InvalidStrongLabel(f"class index {lab.cls} out of range")
        if not 0 <= lab.onset < lab.offset:
            raise InvalidStrongLabel(f"bad interval [{lab.onset}, {lab.offset}]")
        if clip_seconds is not None and lab.offset > clip_seconds:
            raise InvalidStrongLabel(f"offset {lab.offset} beyond clip end {clip_seconds}")
        by_class[lab.cls].append(lab)
    for cls, items in by_class.items():
        items.sort(key=lambda lab: lab.onset)
        for a, b in zip(items, items[1:]):
            if b.onset < a.offset:
                raise InvalidStrongLabel(f"overlapping instances of class {cls}")


def sequential_from_strong(labels, table, clip_seconds=None):
    """Order every onset and offset by time and emit their tokens.

    At equal times, ends come before starts and then lower class indices
    first, so touching instances of one class never look overlapped.
    """
    check_strong(labels, len(table), clip_seconds)
    events = []
    for lab in labels:
        events.append((lab.onset, 1, lab.cls, table.start(lab.cls)))
        events.append((lab.offset, 0, lab.cls, table.end(lab.cls)))
    events.sort()
    return [tok for *_, tok in events]


def validate(seq, table):
    """Return a list of alternation violations; an empty list means well formed."""
    problems = []
    open_ = set()
    for pos, tok in enumerate(seq):
        if not 0 <= tok < table.blank:
            problems.append(f"position {pos}: token id {tok} is not a boundary token")
            continue
        k = token_class(tok)
        name = table.names[k]
        if is_start(tok):
            if k in open_:
                problems.append(f"position {pos}: {name} started twice without an end")
            open_.add(k)
        elif k in open_:
            open_.remove(k)
        else:
            problems.append(f"position {pos}: {name} end without start")
    for k in sorted(open_):
        problems.append(f"{table.names[k]} start never closed")
    return problems


def weak_from_sequential(seq):
    """Set of class indices with at least one start token."""
    return {token_class(tok) for tok in seq if is_start(tok)}


def format_tokens(seq, table):
    return " ".join(table.token_name(t) for t in seq)


def parse_tokens(text, table, lineno=0):
    out = []
    for word in text.split():
        try:
            out.append(table.token_id(word))
        except KeyError:
            raise LabelParseError(lineno, f"unknown token {word!r}") from None
    return out


def _records(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            yield lineno, line


def read_sequential_file(path, table):
    """Read ``<clip_id>\\t<token> <token> ...`` lines, in file order."""
    records = []
    for lineno, line in _records(path):
        clip_id, sep, rest = line.partition("\t")
        if not sep or not clip_id:
            raise LabelParseError(lineno, "expected '<clip_id>\\t<tokens>'")
        records.append((clip_id, parse_tokens(rest, table, lineno)))
    return records


def write_sequential_file(path, records, table):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for clip_id, seq in records:
            fh.write(f"{clip_id}\t{format_tokens(seq, table)}\n")


def read_strong_file(path, table):
    """Read ``<clip_id>\\t<class>\\t<onset>\\t<offset>`` lines grouped by clip.

    Clips keep their first-appearance order.
    """
    grouped = {}
    for lineno, line in _records(path):
        fields = line.split("\t")
        if len(fields) != 4:
            raise LabelParseError(lineno, f"expected 4 tab-separated fields, got {len(fields)}")
        clip_id, name, onset, offset = fields
        try:
            k = table.index(name)
        except KeyError:
            raise LabelParseError(lineno, f"unknown class {name!r}") from None
        try:
            lab = StrongLabel(k, float(onset), float(offset))
        except ValueError:
            raise LabelParseError(lineno, "onset/offset must be numbers") from None
        grouped.setdefault(clip_id, []).append(lab)
    return list(grouped.items())


def write_strong_file(path, records, table):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for clip_id, labels in records:
            for lab in labels:
                fh.write(f"{clip_id}\t{table.names[lab.cls]}\t{lab.onset!r}\t{lab.offset!r}\n")


def read_weak_file(path, table):
    records = []
    for lineno, line in _records(path):
        clip_id, sep, rest = line.partition("\t")
        if not sep or not clip_id:
            raise LabelParseError(lineno, "expected '<clip_id>\\t<classes>'")
        try:
            tags = {table.index(name) for name in rest.split()}
        except KeyError as exc:
            raise LabelParseError(lineno, f"unknown class {exc.args[0]!r}") from None
        records.append((clip_id, tags))
    return records


def write_weak_file(path, records, table):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for clip_id, tags in records:
            names = " ".join(table.names[k] for k in sorted(tags))
            fh.write(f"{clip_id}\t{names}\n")
