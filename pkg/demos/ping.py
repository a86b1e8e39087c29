"""Rank 0 pings every other rank and prints the replies in rank order.

Run it with the launcher, e.g.:

    mprun -n 4 -- demos/ping.py
    mprun -n 4 --backend thread -- demos/ping.py

Output is deterministic (only rank 0 prints, in rank order), so a thread
run and a process run of the same world size print identical text.
"""

from packrun.msgbuf import MsgBuf
from packrun.spmd import spmd_enter


def main() -> None:
    with spmd_enter() as sctx:
        ctx = sctx.transport
        buf = MsgBuf(ctx)
        if sctx.myid == 0:
            if sctx.nprocs == 1:
                print("no peers to ping")
                return
            for peer in range(1, sctx.nprocs):
                buf.reset()
                buf.put_str(f"ping {peer}")
                buf.send(peer)
                buf.get(source=peer)
                print(buf.take_str())
        else:
            buf.get(source=0)
            request = buf.take_str()
            buf.reset()
            buf.put_str(f"pong from rank {sctx.myid} (request was {request!r})")
            buf.send(0)


if __name__ == "__main__":
    main()
