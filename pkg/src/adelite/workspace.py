"""Workspaces: context <-> sub-database <-> file tree.

A context is the member set of one or more aggregates (recomputed from the
roots on every read, so aggregate evolution shows up immediately). Checkout
materializes a context into a directory: container objects become
directories, leaves become files named ``<name>[.<suffix>]``. Each file is a
real copy, a static link pinned to one revision, or a dynamic link resolved
to the latest revision at read time. Links are engine-interpreted pointer
files (``adl-link:<object>[@rev]``), not OS symlinks.

Nothing propagates between the context and the workspace except through
checkin and sync; sync reports conflicts instead of resolving them. File
changes made inside a transaction carry before-images, so an abort restores
the tree byte-for-byte.

Writes through link-mode paths are rejected unless the object is reserved by
the workspace owner (``reserved`` attribute); administrator-rights actions
bypass that check. Link-mode entries also record a RefWS relation from the
workspace object to the target, so change-management triggers can see which
workspaces reference an object.
"""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass, field

from .store import DEFAULT_BRANCH, MapEntry, StoreError, obj_ref
from .values import UNSET

IGNORE_FILE = ".adlignore"
LINK_PREFIX = "adl-link:"


class WorkspaceError(StoreError):
    pass


@dataclass
class SyncReport:
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    updated: list = field(default_factory=list)
    new_objects: list = field(default_factory=list)
    conflicts: list = field(default_factory=list)

    def empty(self) -> bool:
        return not (self.added or self.removed or self.updated or self.new_objects or self.conflicts)


def make_context(engine, name: str, roots, user="") -> list[str]:
    """Create a context over aggregate roots; returns the membership."""

    def build():
        for root in roots:
            engine.store.live_object(root)
        if name in engine.store.contexts:
            raise WorkspaceError(f"context {name!r} already exists")
        engine.apply({"op": "newctx", "name": name, "roots": list(roots)})

    result = engine.run_in_tx("ctx", name, user, build)
    if not result.ok:
        raise WorkspaceError(result.message)
    return engine.store.context_membership(name)


def _filename(store, name: str) -> str:
    suffix = UNSET
    try:
        suffix = store.read_attr(obj_ref(name), "suffix")
    except StoreError:
        pass
    if suffix is not UNSET and suffix:
        return f"{name}.{suffix}"
    return name


def plan_tree(store, context: str) -> dict[str, str]:
    """relpath -> object name for every leaf in the context's aggregates."""
    ctx = store.contexts.get(context)
    if ctx is None:
        raise WorkspaceError(f"unknown context {context!r}")
    paths: dict[str, str] = {}
    placed: set[str] = set()

    def place(name: str, prefix: str):
        if name in placed:
            return
        placed.add(name)
        children = store.composition_children(name)
        if children:
            folder = os.path.join(prefix, name) if prefix or len(ctx.roots) > 1 else name
            for child, _rel in children:
                place(child, folder)
        else:
            paths[os.path.join(prefix, _filename(store, name))] = name

    for root in ctx.roots:
        place(root, "")
    return paths


def _revision_content(store, name: str, branch: str, number: int | None):
    obj = store.live_object(name)
    if branch not in obj.branches:
        raise WorkspaceError(f"unknown branch {branch!r} on {name!r}")
    revisions = obj.branches[branch].revisions
    if not revisions:
        raise WorkspaceError(f"no revisions on {name!r}")
    if number is None:
        rev = revisions[-1]
    else:
        rev = next((r for r in revisions if r.number == number), None)
        if rev is None:
            raise WorkspaceError(f"no revision {number} on {name!r}")
    content = rev.snapshot.get("content")
    if content is None:
        resolved = store.resolved_for(obj_ref(name))
        if resolved.attr_def("content") is None:
            raise WorkspaceError(f"object {name!r} has no content attribute")
        content = ""
    return content, rev.number


def checkout(engine, context: str, directory: str, owner: str, mode_map=None, ws_name=None):
    """Materialize a context into a directory and record the mapping."""
    store = engine.store
    mode_map = mode_map or {}
    if os.path.exists(directory) and os.listdir(directory):
        raise WorkspaceError(f"directory {directory!r} is not empty")
    ws_name = ws_name or f"ws_{os.path.basename(os.path.abspath(directory))}"
    if ws_name in store.workspaces:
        raise WorkspaceError(f"workspace {ws_name!r} already exists")
    paths = plan_tree(store, context)

    def build():
        engine.apply({
            "op": "newws", "name": ws_name, "root": os.path.abspath(directory),
            "context": context, "owner": owner,
        })
        if ws_name not in store.objects:
            engine.create_object_in_tx(ws_name, "workspace", "project", user=owner)
            ctx = engine._base_ctx(obj_ref(ws_name), "checkout", owner)
            engine.write_attr(ctx, obj_ref(ws_name), "author", owner, command="checkout")
        os.makedirs(directory, exist_ok=True)
        for relpath in sorted(paths):
            name = paths[relpath]
            mode = mode_map.get(name, "copy")
            if mode not in ("copy", "static-link", "dynamic-link"):
                raise WorkspaceError(f"bad mode {mode!r} for {name!r}")
            content, number = _revision_content(store, name, DEFAULT_BRANCH, None)
            target = os.path.join(directory, relpath)
            if mode == "copy":
                engine.file_write(target, str(content).encode())
                entry = MapEntry(name, DEFAULT_BRANCH, number, mode)
            elif mode == "static-link":
                engine.file_write(target, f"{LINK_PREFIX}{name}@{number}\n".encode())
                entry = MapEntry(name, DEFAULT_BRANCH, number, mode)
            else:
                engine.file_write(target, f"{LINK_PREFIX}{name}\n".encode())
                entry = MapEntry(name, DEFAULT_BRANCH, None, mode)
            engine.apply({"op": "wsmap", "ws": ws_name, "path": relpath, "entry": entry.to_list()})
            if mode != "copy":
                key = (ws_name, "RefWS", name)
                if key not in store.relations or store.relations[key].deleted:
                    cctx = engine._base_ctx(obj_ref(ws_name), "checkout", owner)
                    engine.create_relation_in_tx(cctx, ws_name, "RefWS", name)

    result = engine.run_in_tx("checkout", ws_name, owner, build)
    if not result.ok:
        raise WorkspaceError(result.message)
    return store.workspaces[ws_name]


def resolve_path(store, ws_name: str, relpath: str) -> MapEntry:
    ws = store.workspaces.get(ws_name)
    if ws is None:
        raise WorkspaceError(f"unknown workspace {ws_name!r}")
    entry = ws.mapping.get(relpath.replace(os.sep, "/")) or ws.mapping.get(relpath)
    if entry is None:
        raise WorkspaceError(f"unmapped path {relpath!r}")
    return entry


def ws_read(store, ws_name: str, relpath: str) -> str:
    """Read through the mode: copies from disk, links from the database."""
    ws = store.workspaces[ws_name]
    entry = resolve_path(store, ws_name, relpath)
    if entry.mode == "copy":
        with open(os.path.join(ws.root, relpath), "rb") as fh:
            return fh.read().decode()
    number = entry.revision if entry.mode == "static-link" else None
    content, _ = _revision_content(store, entry.object, entry.branch, number)
    return str(content)


def ws_write(engine, ws_name: str, relpath: str, content: str, user: str, admin=False):
    """Write through the workspace; link-mode writes need a reservation."""
    store = engine.store
    ws = store.workspaces[ws_name]
    entry = resolve_path(store, ws_name, relpath)
    if entry.mode != "copy" and not admin:
        reserved = store.read_attr(obj_ref(entry.object), "reserved") if _has_attr(
            store, entry.object, "reserved") else UNSET
        if reserved is UNSET or str(reserved) != ws.owner:
            raise WorkspaceError(
                f"protection: {entry.object!r} is not reserved by {ws.owner!r}"
            )
    engine.file_write(os.path.join(ws.root, relpath), content.encode())


def _has_attr(store, name, attr) -> bool:
    return store.resolved_for(obj_ref(name)).attr_def(attr) is not None


def checkin(engine, ws_name: str, paths, user: str, force=False):
    """One transaction: a new revision per changed copy-mode path.

    Replace triggers run per object and may abort the whole batch.
    """
    store = engine.store
    ws = store.workspaces.get(ws_name)
    if ws is None:
        raise WorkspaceError(f"unknown workspace {ws_name!r}")
    todo = []
    for relpath in paths:
        entry = resolve_path(store, ws_name, relpath)
        if entry.mode != "copy":
            raise WorkspaceError(f"cannot check in link-mode path {relpath!r}")
        with open(os.path.join(ws.root, relpath), "rb") as fh:
            text = fh.read().decode()
        pinned, _ = _revision_content(store, entry.object, entry.branch, entry.revision)
        if text != str(pinned) or force:
            todo.append((relpath, entry, text))
    created: list[tuple[str, int]] = []

    def run():
        for relpath, entry, text in todo:
            engine._invoke_inner(
                obj_ref(entry.object), "replace", [], {"content": text, "branch": entry.branch},
                user=user,
            )
            obj = store.objects[entry.object]
            number = obj.branches[entry.branch].revisions[-1].number
            engine.apply({
                "op": "wsmap", "ws": ws_name, "path": relpath,
                "entry": MapEntry(entry.object, entry.branch, number, "copy").to_list(),
            })
            created.append((entry.object, number))

    if not todo:
        return []
    result = engine.run_in_tx("replace", ws_name, user, run)
    if result.status == "aborted":
        raise WorkspaceError(f"checkin rejected: {result.message}")
    if result.status == "error":
        raise WorkspaceError(result.message)
    return created


def _ignored(root: str, relpath: str) -> bool:
    if relpath == IGNORE_FILE:
        return True
    patterns = []
    try:
        with open(os.path.join(root, IGNORE_FILE)) as fh:
            patterns = [line.strip() for line in fh if line.strip()]
    except FileNotFoundError:
        pass
    return any(fnmatch.fnmatch(relpath, pat) for pat in patterns)


def _scan_files(root: str) -> list[str]:
    out = []
    for dirpath, _dirs, files in os.walk(root):
        for name in files:
            rel = os.path.relpath(os.path.join(dirpath, name), root).replace(os.sep, "/")
            if not _ignored(root, rel):
                out.append(rel)
    return sorted(out)


def sync(engine, ws_name: str, direction: str, user: str) -> SyncReport:
    """Propagate adds/removes/changes, at user request only."""
    store = engine.store
    ws = store.workspaces.get(ws_name)
    if ws is None:
        raise WorkspaceError(f"unknown workspace {ws_name!r}")
    if direction not in ("context-to-ws", "ws-to-context"):
        raise WorkspaceError(f"bad sync direction {direction!r}")
    report = SyncReport()
    plan = plan_tree(store, ws.context)

    def to_ws():
        for relpath in sorted(plan):
            name = plan[relpath]
            if relpath in ws.mapping:
                entry = ws.mapping[relpath]
                if entry.mode != "copy":
                    continue
                target = os.path.join(ws.root, relpath)
                pinned, _ = _revision_content(store, name, entry.branch, entry.revision)
                latest, latest_no = _revision_content(store, name, entry.branch, None)
                on_disk = None
                if os.path.exists(target):
                    with open(target, "rb") as fh:
                        on_disk = fh.read().decode()
                if on_disk is None:
                    engine.file_write(target, str(pinned).encode())
                    report.updated.append(relpath)
                elif latest_no != entry.revision:
                    if on_disk == str(pinned):
                        engine.file_write(target, str(latest).encode())
                        engine.apply({
                            "op": "wsmap", "ws": ws_name, "path": relpath,
                            "entry": MapEntry(name, entry.branch, latest_no, "copy").to_list(),
                        })
                        report.updated.append(relpath)
                    else:
                        report.conflicts.append(relpath)
                continue
            content, number = _revision_content(store, name, DEFAULT_BRANCH, None)
            engine.file_write(os.path.join(ws.root, relpath), str(content).encode())
            engine.apply({
                "op": "wsmap", "ws": ws_name, "path": relpath,
                "entry": MapEntry(name, DEFAULT_BRANCH, number, "copy").to_list(),
            })
            report.added.append(relpath)
        for relpath in sorted(set(ws.mapping) - set(plan)):
            engine.file_delete(os.path.join(ws.root, relpath))
            engine.apply({"op": "wsmap", "ws": ws_name, "path": relpath, "entry": None})
            report.removed.append(relpath)

    def to_context():
        ctx = store.contexts[ws.context]
        root_obj = ctx.roots[0] if ctx.roots else None
        files = _scan_files(ws.root)
        for relpath in files:
            if relpath in ws.mapping:
                continue
            base = os.path.basename(relpath)
            stem, dot, suffix = base.partition(".")
            objname = stem
            if objname in store.objects and not store.objects[objname].deleted:
                report.conflicts.append(relpath)
                continue
            with open(os.path.join(ws.root, relpath), "rb") as fh:
                text = fh.read().decode()
            engine.create_object_in_tx(objname, "document", "project", user=user)
            cctx = engine._base_ctx(obj_ref(objname), "sync", user)
            engine.write_attr(cctx, obj_ref(objname), "content", text, command="sync")
            if dot:
                engine.write_attr(cctx, obj_ref(objname), "suffix", suffix, command="sync")
            engine.new_revision_in_tx(objname, DEFAULT_BRANCH, user=user)
            if root_obj is not None:
                reltype = _aggregate_reltype(store, root_obj)
                engine.create_relation_in_tx(cctx, root_obj, reltype, objname)
            number = store.objects[objname].branches[DEFAULT_BRANCH].revisions[-1].number
            engine.apply({
                "op": "wsmap", "ws": ws_name, "path": relpath,
                "entry": MapEntry(objname, DEFAULT_BRANCH, number, "copy").to_list(),
            })
            report.new_objects.append(objname)
            report.added.append(relpath)
        for relpath in sorted(ws.mapping):
            if os.path.exists(os.path.join(ws.root, relpath)):
                continue
            entry = ws.mapping[relpath]
            for parent in store.composition_parents(entry.object):
                for key in store.live_rels(parent, None, entry.object):
                    if key[1] in store.composition_reltypes():
                        engine.apply({
                            "op": "tombrel", "origin": key[0], "reltype": key[1], "dest": key[2],
                        })
            engine.apply({"op": "wsmap", "ws": ws_name, "path": relpath, "entry": None})
            report.removed.append(relpath)

    fn = to_ws if direction == "context-to-ws" else to_context
    result = engine.run_in_tx("sync", ws_name, user, fn)
    if not result.ok:
        raise WorkspaceError(result.message)
    return report


def _aggregate_reltype(store, root: str) -> str:
    children = store.composition_children(root)
    if children:
        return children[0][1]
    return "part"
