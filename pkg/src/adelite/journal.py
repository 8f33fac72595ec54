"""Append-only journal plus periodic snapshots; recovery and store locking.

A store directory holds:

    journal.log     one line per committed delta:
                    seq|timestamp|user|op|key=value|key=value...
                    (values JSON-encoded, then %/|/newline percent-escaped)
    snapshot/NNNNNNNN/state.json
                    full store state as of journal seq NNNNNNNN
    lock            advisory flock taken for the whole engine session

Recovery = newest snapshot + the journal tail with seq greater than the
snapshot's. Test fixtures may write journal lines directly and recover from
them.
"""

from __future__ import annotations

import fcntl
import json
import os

from .store import Store

SNAPSHOT_EVERY = 500


class JournalError(ValueError):
    pass


def _escape(text: str) -> str:
    return text.replace("%", "%25").replace("|", "%7C").replace("\n", "%0A")


def _unescape(text: str) -> str:
    return text.replace("%0A", "\n").replace("%7C", "|").replace("%25", "%")


def encode_line(seq: int, ts: str, user: str, op: str, fields: dict) -> str:
    parts = [str(seq), _escape(ts), _escape(user or ""), _escape(op)]
    for key in sorted(fields):
        parts.append(f"{_escape(key)}={_escape(json.dumps(fields[key], sort_keys=True))}")
    return "|".join(parts)


def decode_line(line: str) -> tuple[int, str, str, dict]:
    parts = line.rstrip("\n").split("|")
    if len(parts) < 4:
        raise JournalError(f"malformed journal line: {line!r}")
    seq = int(parts[0])
    ts, user, op = (_unescape(p) for p in parts[1:4])
    delta = {"op": op}
    for pair in parts[4:]:
        key, _, value = pair.partition("=")
        delta[_unescape(key)] = json.loads(_unescape(value))
    return seq, ts, user, delta


class Journal:
    def __init__(self, store_dir: str):
        self.dir = os.path.abspath(store_dir)
        self.path = os.path.join(self.dir, "journal.log")
        self.snapshot_dir = os.path.join(self.dir, "snapshot")
        self._lock_fh = None
        self.seq = self._scan_seq()
        self._since_snapshot = 0

    def _scan_seq(self) -> int:
        last = 0
        try:
            with open(self.path) as fh:
                for line in fh:
                    if line.strip():
                        last = int(line.split("|", 1)[0])
        except FileNotFoundError:
            pass
        return last

    @classmethod
    def init_store(cls, store_dir: str) -> "Journal":
        os.makedirs(store_dir, exist_ok=True)
        journal = cls(store_dir)
        if not os.path.exists(journal.path):
            with open(journal.path, "w"):
                pass
        return journal

    def lock(self):
        """One CLI invocation per store: advisory lock for the session."""
        self._lock_fh = open(os.path.join(self.dir, "lock"), "w")
        fcntl.flock(self._lock_fh, fcntl.LOCK_EX)

    def unlock(self):
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def append_group(self, deltas, ts, user: str, op: str):
        """One committed transaction (or error-effects group) -> N lines."""
        with open(self.path, "a") as fh:
            for delta in deltas:
                self.seq += 1
                fields = {k: v for k, v in delta.items() if k != "op"}
                fh.write(encode_line(self.seq, ts.isoformat(), user, delta["op"], fields) + "\n")
        self._since_snapshot += len(deltas)

    def maybe_snapshot(self, store: Store):
        if self._since_snapshot >= SNAPSHOT_EVERY:
            self.snapshot(store)

    def snapshot(self, store: Store):
        target = os.path.join(self.snapshot_dir, f"{self.seq:08d}")
        os.makedirs(target, exist_ok=True)
        with open(os.path.join(target, "state.json"), "w") as fh:
            json.dump({"seq": self.seq, "state": store.serialize()}, fh, sort_keys=True)
        self._since_snapshot = 0

    def latest_snapshot(self):
        try:
            entries = sorted(os.listdir(self.snapshot_dir))
        except FileNotFoundError:
            return None
        for entry in reversed(entries):
            path = os.path.join(self.snapshot_dir, entry, "state.json")
            if os.path.exists(path):
                with open(path) as fh:
                    return json.load(fh)
        return None

    def recover(self) -> Store:
        """Last snapshot plus the journal tail."""
        snap = self.latest_snapshot()
        if snap is None:
            store = Store()
            floor = 0
        else:
            store = Store.deserialize(snap["state"])
            floor = snap["seq"]
        try:
            with open(self.path) as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    seq, _ts, _user, delta = decode_line(line)
                    if seq <= floor:
                        continue
                    store.apply(delta)
        except FileNotFoundError:
            pass
        return store


def open_store(store_dir: str, must_exist=True) -> tuple[Store, Journal]:
    journal_path = os.path.join(store_dir, "journal.log")
    if must_exist and not os.path.exists(journal_path):
        raise JournalError(f"no store at {store_dir!r} (run `adl init` first)")
    journal = Journal.init_store(store_dir)
    journal.lock()
    return journal.recover(), journal
