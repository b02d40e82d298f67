"""Regenerate tests/data/rademacher_golden.txt from the scalar oracle."""

from pathlib import Path

from oracles import splitmix_signs

TRIPLES = [
    (0, 0, 64), (0, 1, 64), (1, 0, 2), (7, 3, 128), (42, 0, 100),
    (42, 7, 65), (123, 2, 1), (2023, 5, 300), (424242, 0, 257), (17, 11, 63),
    (0xFFFFFFFF, 0, 64), (0xFFFFFFFF, 999, 130), (0x80000000, 3, 200), (1, 1, 1000),
    (99, 599, 129), (3141592653, 12, 77), (2718281828, 0, 512), (5, 63, 31),
    (65536, 4, 192), (777, 100000, 96),
]


def main():
    lines = ["# seed j d, then the +1/-1 sequence (SplitMix64, LSB-first)"]
    for seed, j, d in TRIPLES:
        signs = splitmix_signs(seed, j, d)
        lines.append(f"{seed} {j} {d}")
        lines.append(" ".join("+1" if s > 0 else "-1" for s in signs))
    path = Path(__file__).parent / "data" / "rademacher_golden.txt"
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
