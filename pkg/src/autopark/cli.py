"""Command-line entry point: ``autopark {datagen,train,eval,render}``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import world


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_datagen(args):
    from .dataset import quality_filter, record_episode, write_dataset
    from .evaluate import parse_seed_range

    accepted = rejected = aborted = 0
    for seed in parse_seed_range(args.seed_range):
        try:
            ep = record_episode(seed, args.kind, args.pedestrians, args.occupancy)
        except RuntimeError as exc:
            aborted += 1
            _log(f"seed {seed}: aborted ({exc})")
            continue
        report = quality_filter(ep)
        _log(f"seed {seed}: {len(ep)} frames, pe={report.pe:.3f} m oe={report.oe:.3f} deg "
             f"{ep.outcome.reason} -> {'accepted' if report.accepted else 'rejected'}")
        if report.accepted:
            write_dataset([ep], args.out)
            accepted += 1
        else:
            rejected += 1
    print("accepted,rejected,aborted")
    print(f"{accepted},{rejected},{aborted}")
    return 0


def _write_loss_curve(history, base: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(base.with_suffix(".loss.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss", "ctrl", "pred", "token_accuracy", "seconds"])
        for s in history:
            wr.writerow([s.epoch, f"{s.loss:.6f}", f"{s.ctrl:.6f}", f"{s.pred:.6f}", f"{s.token_accuracy:.5f}",
                         f"{s.seconds:.2f}"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ep = [s.epoch for s in history]
    ax.plot(ep, [s.loss for s in history], label="total")
    ax.plot(ep, [s.ctrl for s in history], label="control")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [s.token_accuracy for s in history], color="k", ls="--", label="token acc")
    ax2.set_ylabel("token accuracy")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(base.with_suffix(".loss.png"), dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_train(args):
    from .dataset import read_dataset
    from .policy import save_checkpoint
    from .train import TrainConfig, train

    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    config = TrainConfig.parse(Path(args.config).read_text(), **overrides)
    eps = read_dataset(config.dataset, limit=config.episodes or None)
    _log(f"training on {len(eps)} episodes, {sum(len(e) for e in eps)} frames")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    policy, history = train(eps, config, log=_log)
    save_checkpoint(policy, out)
    _write_loss_curve(history, out)
    print("epoch,loss,token_accuracy")
    for s in history:
        print(f"{s.epoch},{s.loss:.6f},{s.token_accuracy:.5f}")
    return 0


def cmd_eval(args):
    from .evaluate import closed_loop_eval, parse_seed_range
    from .policy import load_checkpoint

    if args.expert == bool(args.ckpt):
        raise SystemExit("eval: give exactly one of --ckpt or --expert")
    if args.expert and (args.ablate_pedestrian or args.ablate_goal_attn):
        raise SystemExit("eval: ablation flags apply to a learned policy only")
    policy = None if args.expert else load_checkpoint(args.ckpt)
    report = closed_loop_eval(policy, parse_seed_range(args.seeds), args.kind, args.ablate_pedestrian,
                              args.ablate_goal_attn, log=_log)
    sys.stdout.write(report.summary_csv())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(report.summary_csv())
        (out / "episodes.csv").write_text(report.rows_csv())
        _eval_figure(report, out / "episodes.png")
    return 0


def _eval_figure(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for ok, colour, label in ((True, "tab:green", "success"), (False, "tab:red", "failure")):
        rows = [r for r in report.rows if r.success == ok]
        ax.scatter([r.pe for r in rows], [r.oe for r in rows], c=colour, s=14, label=label)
    ax.axvline(0.5, color="k", lw=0.6)
    ax.axhline(0.5, color="k", lw=0.6)
    ax.set_xscale("symlog", linthresh=0.1)
    ax.set_yscale("symlog", linthresh=0.1)
    ax.set_xlabel("final position error (m)")
    ax.set_ylabel("final orientation error (deg)")
    ax.set_title(f"SR {report.sr:.1f}%  CR {report.cr:.1f}%")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_render(args):
    from .policy import load_checkpoint
    from .report import render_outputs

    policy = load_checkpoint(args.ckpt)
    for path in render_outputs(args.episode, policy, args.out, frame=args.frame, every=args.every):
        print(path)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="autopark", description="Camera-based parking policy toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="record expert episodes and write the accepted ones")
    d.add_argument("--seed-range", required=True, help="inclusive range A..B")
    d.add_argument("--kind", required=True, choices=world.KINDS)
    d.add_argument("--out", required=True)
    d.add_argument("--pedestrians", type=int, default=-1, help="pedestrian count (-1: random 0..4)")
    d.add_argument("--occupancy", type=float, default=0.6)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train a policy from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--dataset")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--ckpt")
    e.add_argument("--expert", action="store_true", help="evaluate the rule-based expert instead")
    e.add_argument("--seeds", required=True, help="inclusive range A..B")
    e.add_argument("--kind", required=True, choices=world.KINDS)
    group = e.add_mutually_exclusive_group()
    group.add_argument("--ablate-pedestrian", action="store_true", help="use the bare ego token as motion context")
    group.add_argument("--ablate-goal-attn", action="store_true", help="drop the goal cross-attention context")
    e.add_argument("--out", help="directory for episodes.csv, summary.csv and a figure")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="figures and tables for a logged episode")
    r.add_argument("--episode", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--frame", type=int)
    r.add_argument("--every", type=int, default=5, help="frame stride for the per-frame table")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
