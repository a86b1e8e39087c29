"""Serialization tour: define types, pack values, inspect both wire forms.

No transport involved; runs as a plain script:

    python3 demos/pack_tour.py
"""

from packrun.idl import TypeRegistry, format_descriptors, parse_kind
from packrun.msgbuf import MsgBuf  # noqa: F401  (imported for the docstring's sake)
from packrun.pack import Buffer, Encoding, Prim, PrimTag, Rec, Seq, Str, pack, unpack

SOURCE = """
// a tagged sample with a variable-length trace
record sample {
    label: string;
    weight: f64;
    trace: seq<i32>;
}
"""


def main() -> None:
    registry = TypeRegistry.from_idl(SOURCE).check()
    print(format_descriptors(registry))
    print()

    value = Rec("sample", (
        Str("probe-7"),
        Prim(PrimTag.F64, 0.125),
        Seq([Prim(PrimTag.I32, v) for v in (3, -1, 4, -1, 5)]),
    ))
    kind = parse_kind("sample")

    for encoding in (Encoding.NATIVE, Encoding.PORTABLE):
        buf = Buffer(encoding)
        pack(buf, value, kind, registry)
        print(f"{encoding.name.lower()}: {buf.size} bytes")
        print(f"  {buf.data.hex()}")
        decoded = unpack(buf, kind, registry)
        assert decoded == value
    print("round trips verified")


if __name__ == "__main__":
    main()
