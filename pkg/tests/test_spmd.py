"""Scoped runtime: enter-once semantics and finalize on every exit path."""

import importlib
import sys
import threading

import pytest

from packrun._slots import Slot, install_slot
from packrun.spmd import AlreadyActive, GlobalScopeError, SpmdContext, spmd_enter, spmd_exit
from packrun.transport import WorldConfig
from support import make_world


@pytest.fixture
def fresh_slot():
    install_slot(Slot())
    yield
    install_slot(None)


def _stage(ctx):
    """Pretend a launcher prepared this logical process's transport."""
    slot = Slot()
    slot.staged_transport = ctx
    install_slot(slot)


def test_enter_populates_identity(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    assert (sctx.myid, sctx.nprocs) == (0, 1)
    assert sctx.active
    spmd_exit(sctx)
    assert not sctx.active
    assert sctx.transport.finalized


def test_second_enter_while_active(fresh_slot):
    spmd_enter(WorldConfig(nprocs=1))
    with pytest.raises(AlreadyActive):
        spmd_enter(WorldConfig(nprocs=1))


def test_reenter_after_exit_is_still_rejected(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    spmd_exit(sctx)
    with pytest.raises(AlreadyActive):
        spmd_enter(WorldConfig(nprocs=1))


def test_exit_is_idempotent(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    calls = []
    original = sctx.transport.finalize
    sctx.transport.finalize = lambda: (calls.append(1), original())[1]
    spmd_exit(sctx)
    spmd_exit(sctx)
    assert calls == [1]


def test_with_block_finalizes_on_error(fresh_slot):
    captured = {}
    with pytest.raises(RuntimeError, match="mid-scope"):
        with spmd_enter(WorldConfig(nprocs=1)) as sctx:
            captured["ctx"] = sctx
            raise RuntimeError("mid-scope")
    assert captured["ctx"].transport.finalized
    assert not captured["ctx"].active


def test_exactly_once_finalize_across_paths(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    calls = []
    original = sctx.transport.finalize
    sctx.transport.finalize = lambda: (calls.append(1), original())[1]
    try:
        with sctx:
            raise ValueError("unwind")
    except ValueError:
        pass
    spmd_exit(sctx)
    with sctx:
        pass
    assert calls == [1]


def test_at_exit_callbacks_run_lifo_before_finalize(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    order = []
    sctx.at_exit(lambda: order.append(("first", sctx.transport.finalized)))
    sctx.at_exit(lambda: order.append(("second", sctx.transport.finalized)))
    spmd_exit(sctx)
    assert order == [("second", False), ("first", False)]


def test_failing_callback_cannot_block_finalize(fresh_slot):
    sctx = spmd_enter(WorldConfig(nprocs=1))
    ran = []
    sctx.at_exit(lambda: ran.append("inner"))
    sctx.at_exit(lambda: 1 / 0)
    with pytest.raises(ZeroDivisionError):
        spmd_exit(sctx)
    assert ran == ["inner"]
    assert sctx.transport.finalized


def test_enter_at_import_time_is_rejected(tmp_path, fresh_slot):
    module_file = tmp_path / "eager_runtime_user.py"
    module_file.write_text(
        "from packrun.spmd import spmd_enter\n"
        "from packrun.transport import WorldConfig\n"
        "CTX = spmd_enter(WorldConfig(nprocs=1))\n")
    sys.path.insert(0, str(tmp_path))
    try:
        with pytest.raises(GlobalScopeError) as err:
            importlib.import_module("eager_runtime_user")
        assert err.value.module == "eager_runtime_user"
    finally:
        sys.path.remove(str(tmp_path))
        sys.modules.pop("eager_runtime_user", None)


def test_staged_transport_adoption():
    _, (ctx,) = make_world(1)
    _stage(ctx)
    try:
        sctx = spmd_enter()
        assert sctx.transport is ctx
        assert sctx.myid == 0
        spmd_exit(sctx)
    finally:
        install_slot(None)


def test_multi_rank_ids_are_unique():
    _, ctxs = make_world(3)
    ids = {}
    errors = []

    def logical_process(ctx):
        _stage(ctx)
        try:
            with spmd_enter() as sctx:
                gathered = sctx.transport.gather(sctx.transport.world, 0,
                                                 bytes([sctx.myid]))
                if gathered is not None:
                    ids["all"] = gathered
        except Exception as exc:
            errors.append(exc)
        finally:
            install_slot(None)

    threads = [threading.Thread(target=logical_process, args=(c,), daemon=True)
               for c in ctxs]
    for t in threads:
        t.start()
    for t in threads:
        t.join(10)
    assert not errors
    assert ids["all"] == [b"\x00", b"\x01", b"\x02"]
    assert all(c.finalized for c in ctxs)
