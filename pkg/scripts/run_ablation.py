"""Run the three-variant Signal-Game comparison and print the final table.

    python scripts/run_ablation.py [--config configs/signal_acceptance.ini] [--out runs/acceptance]
"""
import argparse
import json
from pathlib import Path

from naht_mat import harness


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/signal_acceptance.ini")
    ap.add_argument("--out", default=None)
    ap.add_argument("--parallel", action="store_true")
    args = ap.parse_args()
    cfg = harness.load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    results = harness.ablate(cfg, out, parallel=args.parallel)
    print(f"{'variant':24s} {'train':>16s} {'test':>16s}")
    for v, s in results.items():
        cells = []
        for role in ("train", "test"):
            c = s[role]["overall"]
            cells.append(f"{c['mean']:.3f} ±{(c['hi'] - c['lo']) / 2:.3f}")
        print(f"{v:24s} {cells[0]:>16s} {cells[1]:>16s}")
    per_fam = results["mat_naht"]["test"]["per_family"]
    print("mat_naht test return by family:", json.dumps({f: round(c["mean"], 3) for f, c in per_fam.items()}))


if __name__ == "__main__":
    main()
