"""The message buffer idiom: pack, send, unpack on the other side.

A buffer is loaded with mixed values by chaining put calls, shipped with
send (which leaves the buffer empty for reuse), and drained in field
order on the receiving rank. The second half broadcasts one buffer from
rank 0 and gathers a confirmation from everyone. Needs at least 2 ranks:

    mprun -n 2 -- demos/idiom.py
"""

import sys

from packrun.msgbuf import MsgBuf
from packrun.spmd import spmd_enter


def main() -> None:
    with spmd_enter() as sctx:
        if sctx.nprocs < 2:
            print("idiom demo needs at least 2 ranks", file=sys.stderr)
            sctx.abort(2)
        ctx = sctx.transport
        buf = MsgBuf(ctx)

        if sctx.myid == 0:
            buf.put_i32(42).put_f64(2.5).put_str("hello")
            buf.send(1)
        elif sctx.myid == 1:
            buf.get(source=0)
            i = buf.take_i32()
            f = buf.take_f64()
            s = buf.take_str()
            buf.reset()
            buf.put_str(f"rank 1 unpacked: i32={i} f64={f} str={s!r}")
            buf.send(0)

        share = MsgBuf(ctx)
        if sctx.myid == 0:
            share.put_str("broadcast payload")
        share.bcast(0)
        text = share.take_str()

        ack = MsgBuf(ctx)
        ack.put_bool(text == "broadcast payload")
        ack.gather(0)
        if sctx.myid == 0:
            # print everything here, in a fixed order, so thread and
            # process runs emit identical logs
            print(buf.get(source=1).take_str())
            oks = [ack.take_bool() for _ in range(sctx.nprocs)]
            print(f"broadcast confirmed by {sum(oks)} of {sctx.nprocs} ranks")


if __name__ == "__main__":
    main()
