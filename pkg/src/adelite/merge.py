"""Line-based three-way merge (diff3 style) with textual conflict markers.

Built on a longest-common-subsequence diff of each side against the common
ancestor. Change regions from both sides are merged over ancestor
coordinates; a region changed on one side only takes that side, identical
changes collapse, and diverging changes become a conflict block:

    <<<<<<< ours
    ...
    =======
    ...
    >>>>>>> theirs

With no ancestor available the fallback is a two-way comparison that always
flags a conflict unless the sides are identical.
"""

from __future__ import annotations

from dataclasses import dataclass

MARK_OURS = "<<<<<<< ours"
MARK_SEP = "======="
MARK_THEIRS = ">>>>>>> theirs"


def _lcs_matches(a: list[str], b: list[str]) -> list[tuple[int, int]]:
    """Index pairs of one longest common subsequence of a and b."""
    n, m = len(a), len(b)
    # DP over suffix lengths; fine at workspace-file scale.
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = table[i], table[i + 1]
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                row[j] = nxt[j + 1] + 1
            else:
                row[j] = nxt[j] if nxt[j] >= row[j + 1] else row[j + 1]
    out = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            out.append((i, j))
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    return out


def diff_blocks(a: list[str], b: list[str]) -> list[tuple[int, int, int, int]]:
    """Non-matching runs as (a_lo, a_hi, b_lo, b_hi), half-open."""
    blocks = []
    ai = bi = 0
    for ma, mb in _lcs_matches(a, b) + [(len(a), len(b))]:
        if ma > ai or mb > bi:
            blocks.append((ai, ma, bi, mb))
        ai, bi = ma + 1, mb + 1
    return blocks


@dataclass
class MergeResult:
    lines: list[str]
    conflicts: int

    @property
    def clean(self) -> bool:
        return self.conflicts == 0

    def text(self) -> str:
        return "".join(line if line.endswith("\n") else line + "\n" for line in self.lines)


def merge3(base: str, ours: str, theirs: str) -> MergeResult:
    base_l = base.splitlines()
    ours_l = ours.splitlines()
    theirs_l = theirs.splitlines()
    d_ours = diff_blocks(base_l, ours_l)
    d_theirs = diff_blocks(base_l, theirs_l)
    regions = _combine_regions(d_ours, d_theirs)
    assign_ours = _assign(regions, d_ours)
    assign_theirs = _assign(regions, d_theirs)
    out: list[str] = []
    conflicts = 0
    base_pos = ours_pos = theirs_pos = 0
    for idx, (lo, hi) in enumerate(regions):
        gap = lo - base_pos
        out.extend(base_l[base_pos:lo])
        ours_pos += gap
        theirs_pos += gap
        base_pos = lo
        o_len = (hi - lo) + sum(
            (o_hi - o_lo) - (b_hi - b_lo)
            for (b_lo, b_hi, o_lo, o_hi), where in zip(d_ours, assign_ours) if where == idx
        )
        t_len = (hi - lo) + sum(
            (o_hi - o_lo) - (b_hi - b_lo)
            for (b_lo, b_hi, o_lo, o_hi), where in zip(d_theirs, assign_theirs) if where == idx
        )
        ours_part = ours_l[ours_pos : ours_pos + o_len]
        theirs_part = theirs_l[theirs_pos : theirs_pos + t_len]
        base_part = base_l[lo:hi]
        if ours_part == base_part:
            out.extend(theirs_part)
        elif theirs_part == base_part or ours_part == theirs_part:
            out.extend(ours_part)
        else:
            conflicts += 1
            out.append(MARK_OURS)
            out.extend(ours_part)
            out.append(MARK_SEP)
            out.extend(theirs_part)
            out.append(MARK_THEIRS)
        base_pos = hi
        ours_pos += o_len
        theirs_pos += t_len
    out.extend(base_l[base_pos:])
    return MergeResult(out, conflicts)


def _combine_regions(d_ours, d_theirs):
    """Union of change regions over base coordinates.

    Only genuinely overlapping spans merge; touching-but-disjoint edits
    (adjacent lines changed on different sides) stay separate regions and
    therefore never conflict. An empty span overlapping a non-empty one
    (insert into a replaced range) still merges.
    """
    spans = [(lo, hi) for lo, hi, _, _ in d_ours] + [(lo, hi) for lo, hi, _, _ in d_theirs]
    spans.sort()
    merged = []
    for lo, hi in spans:
        if merged and (lo < merged[-1][1] or (lo == merged[-1][1] == merged[-1][0])
                       or (lo == hi and merged[-1][0] <= lo < merged[-1][1])):
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _assign(regions, blocks):
    """First region containing each block's base span (always exists)."""
    out = []
    for b_lo, b_hi, _o_lo, _o_hi in blocks:
        where = next(i for i, (lo, hi) in enumerate(regions) if lo <= b_lo and b_hi <= hi)
        out.append(where)
    return out


def merge2(ours: str, theirs: str) -> MergeResult:
    """No-ancestor fallback: identical or a single mandatory conflict."""
    if ours == theirs:
        return MergeResult(ours.splitlines(), 0)
    lines = [MARK_OURS, *ours.splitlines(), MARK_SEP, *theirs.splitlines(), MARK_THEIRS]
    return MergeResult(lines, 1)
