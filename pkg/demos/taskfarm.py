"""A complete master-slave farm run under the launcher.

Rank 0 fans a list of squaring jobs over the other ranks and prints the
results in job order; every other rank serves until it receives STOP.

    mprun -n 4 -- demos/taskfarm.py
"""

from packrun.msgbuf import MsgBuf
from packrun.slave import HandlerTable, MasterPool, slave_loop
from packrun.spmd import spmd_enter


def build_table() -> HandlerTable:
    table = HandlerTable()

    def square(buf: MsgBuf) -> None:
        v = buf.take_i64()
        buf.reset()
        buf.put_i64(v * v)

    table.register("square", square)
    return table


def main() -> None:
    with spmd_enter() as sctx:
        ctx = sctx.transport
        table = build_table()
        if sctx.myid != 0:
            slave_loop(sctx, table)
            return
        inputs = list(range(1, 13))
        with MasterPool(sctx, table) as pool:
            if pool.nslaves == 0:
                print("no slaves; run with -n 2 or more")
                return
            replies = pool.run_joblist(
                "square", [MsgBuf(ctx).put_i64(v) for v in inputs])
            for v, reply in zip(inputs, replies):
                print(f"{v}^2 = {reply.take_i64()}")


if __name__ == "__main__":
    main()
