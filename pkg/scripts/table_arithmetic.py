"""Recompute published percentage columns from their absolute counts.

Prints each row with the recomputed value next to the reported one and marks
rows where the two disagree at one decimal.
"""

import argparse
import sys

from kbprobe.metrics import accuracy_ratio, filtering_rates, pct, recall_ratio

# label, raw, unique, valid, reported dedup, reported audit
FILTERING = [
    ("DL 8B", 3179, 3056, 2454, "3.9%", "19.7%"),
    ("DL 70B", 4351, 4244, 3746, "2.5%", "11.7%"),
    ("DL 405B", 4353, 4234, 3589, "2.7%", "15.2%"),
    ("MLS 8B", 3454, 3319, 2873, "3.9%", "13.4%"),
    ("MLS 70B", 4567, 4432, 4111, "3.0%", "7.2%"),
    ("MLS 405B", 5416, 5317, 4757, "1.8%", "10.5%"),
    ("PM 8B", 3991, 3863, 2968, "3.2%", "23.2%"),
    ("PM 70B", 4089, 3955, 3394, "3.3%", "14.2%"),
    ("PM 405B", 4131, 4061, 3603, "1.7%", "11.3%"),
]

# label, unique, valid, union, reported recall, reported accuracy
CROSS_SERIES = [
    ("DL Llama", 2997, 2674, 8919, "30.0%", "89.2%"),
    ("DL Qwen", 3917, 3405, 8919, "38.2%", "86.9%"),
    ("DL R1", 3779, 2915, 8919, "32.7%", "77.1%"),
    ("MLS Llama", 3078, 2817, 9493, "29.7%", "91.5%"),
    ("MLS Qwen", 4274, 3459, 9493, "36.4%", "80.9%"),
    ("MLS R1", 4096, 3414, 9493, "36.0%", "82.3%"),
    ("PM Llama", 2647, 2208, 9373, "23.6%", "83.4%"),
    ("PM Qwen", 4329, 4046, 9373, "43.2%", "93.5%"),
    ("PM R1", 3852, 3253, 9373, "34.7%", "79.8%"),
]


def main(argv=None):
    argparse.ArgumentParser(description=__doc__.splitlines()[0]).parse_args(argv)
    bad = 0
    print("filtering rates (dedup, audit)")
    for label, raw, uniq, valid, rd, ra in FILTERING:
        d, a = map(pct, filtering_rates(raw, uniq, valid))
        flag = "" if (d, a) == (rd, ra) else "  <-- differs"
        bad += bool(flag)
        print(f"  {label:10s} {d:>6s} {a:>6s}   reported {rd:>6s} {ra:>6s}{flag}")
    print("recall and accuracy")
    for label, uniq, valid, union, rr, racc in CROSS_SERIES:
        r, acc = pct(recall_ratio(valid, union)), pct(accuracy_ratio(uniq, valid))
        flag = "" if (r, acc) == (rr, racc) else "  <-- differs"
        bad += bool(flag)
        print(f"  {label:10s} {r:>6s} {acc:>6s}   reported {rr:>6s} {racc:>6s}{flag}")
    print(f"{bad} rows differ")
    return 0


if __name__ == "__main__":
    sys.exit(main())
