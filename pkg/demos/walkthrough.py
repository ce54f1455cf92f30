"""End-to-end walkthrough on the synthetic shape pair.

Trains the frozen base model, fits the interpretive model on top of it,
renders the cross-domain match report and sweeps prototype removal.

    python demos/walkthrough.py --out /tmp/protoda_demo          # default profile, a few minutes
    python demos/walkthrough.py --out /tmp/protoda_demo --quick  # shortened schedule
"""
import argparse
import warnings
from pathlib import Path

from protoda import emit_report, evaluate, removal_sweep, resolve, run_protocol, train_base
from protoda.base_model import accuracy
from protoda.cli import load_pair
from protoda.datasets import SOURCE, TARGET
from protoda.explain import match_cross_domain


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="protoda_demo")
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()
    out = Path(args.out)

    overrides = {}
    if args.quick:
        overrides = {"base": {"epochs": 10}, "interp": {"epochs": 20, "push_every": 10}}
    cfg = resolve(overrides, profile="synthetic")
    pair = load_pair(cfg)
    print(f"{len(pair.source)} source / {len(pair.target)} target images, classes {pair.categories}")

    base = train_base(pair, cfg.base)
    print(f"base model accuracy: source {accuracy(base, pair, SOURCE):.3f}, target {accuracy(base, pair, TARGET):.3f}")

    model = run_protocol(base, pair, cfg.interp, out_dir=out / "interp")
    m = evaluate(model, pair)
    print(f"interpretive model: agreement {m['agreement']:.3f}, fidelity {m['fidelity']:.3f}, "
          f"acc {m['acc_hp']:.3f} vs base {m['acc_hf']:.3f}")

    # what does the first prototype of each class match in the target domain?
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k, name in enumerate(pair.categories):
            mt = match_cross_domain(model, pair, k, m=3)[0]
            hits = ", ".join(f"{e.sample_id} ({e.score:.2f}{' !' if e.mismatch else ''})" for e in mt.target)
            print(f"  {name:9s} prototype {mt.prototype_id}: {hits}")
    emit_report(model, pair, out / "report")
    print(f"report: {out / 'report' / 'index.html'}")

    curve = removal_sweep(model, pair)
    curve.save(out / "inspect")
    for i, st in enumerate(curve.steps):
        print(f"  removed {i:2d} per class: source {st.acc_source:.3f}, target {st.acc_target:.3f}")
    print(f"Spearman of drops: {curve.spearman:.3f} {curve.spearman_reason or ''}")


if __name__ == "__main__":
    main()
