"""Generate a procedural glyph atlas in the standard layout
(root/alphabet_XXX/class_XXXX/sample_XX.png).

Example:
    python3 scripts/make_atlas.py --out data/atlas --alphabets 40 --samples 20
"""

from __future__ import annotations

import argparse

from cipherline.synth import make_synthetic_atlas


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--alphabets", type=int, default=40)
    ap.add_argument("--classes-per-alphabet", type=int, default=1)
    ap.add_argument("--samples", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = make_synthetic_atlas(
        args.out,
        n_alphabets=args.alphabets,
        classes_per_alphabet=args.classes_per_alphabet,
        samples_per_class=args.samples,
        seed=args.seed,
    )
    n = args.alphabets * args.classes_per_alphabet
    print(f"wrote {n} classes ({args.samples} samples each) under {root}")


if __name__ == "__main__":
    main()
