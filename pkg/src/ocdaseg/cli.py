"""Command-line entry point.

All verbs operate inside one experiment directory (--out, or the
OCDASEG_OUT_ROOT environment variable) with a fixed layout:

    <out>/corpus      generated dataset        (gen-data)
    <out>/stage1      translator checkpoint    (train-stage1)
    <out>/translated  translated corpus        (translate)
    <out>/stage2      detector checkpoint      (train-stage2)
    <out>/metrics_*   evaluation reports       (evaluate)
    <out>/ablations   ablation suite outputs   (ablate)

Exit codes: 0 success, 2 configuration/usage errors, 1 runtime failures.
"""

import argparse
import json
import os
import sys

from ocdaseg.config import ExperimentConfig, load_config
from ocdaseg.exceptions import ConfigError, TrainingDiverged

OUT_ROOT_ENV = "OCDASEG_OUT_ROOT"
DEFAULT_OUT = "ocdaseg_runs"


def _add_common(sub):
    sub.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument(
        "--out",
        help=f"experiment directory (default ${OUT_ROOT_ENV} or ./{DEFAULT_OUT})",
    )


def build_parser():
    p = argparse.ArgumentParser(
        prog="ocdaseg",
        description="two-stage open-compound adaptation for nuclei segmentation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    for name, descr in [
        ("gen-data", "generate the source/target corpus"),
        ("train-stage1", "train the style-disentangled translator"),
        ("translate", "synthesize the translated training corpus"),
        ("train-stage2", "train the adaptive instance segmenter"),
        ("evaluate", "score a checkpoint on the test splits"),
        ("ablate", "run the ablation suite"),
    ]:
        s = sub.add_parser(name, help=descr)
        _add_common(s)
        if name == "translate":
            s.add_argument("--checkpoint", help="stage-1 checkpoint (default <out>/stage1/stage1.pt)")
            s.add_argument("--mode", choices=["encoded", "both"],
                           help="style source: donor-encoded only, or plus randomized")
        if name == "train-stage2":
            s.add_argument("--checkpoint", help="stage-1 checkpoint for subdomain labels")
        if name == "evaluate":
            s.add_argument("--checkpoint", help="stage-2 checkpoint (default <out>/stage2/stage2.pt)")
            s.add_argument("--mode", choices=["test_seen", "test_unseen", "both"],
                           default="both", help="which split(s) to score")
        if name == "ablate":
            s.add_argument(
                "--axes",
                help="comma list of switches and/or integer K values (default: all switches)",
            )
    return p


def _resolve(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or os.environ.get(OUT_ROOT_ENV) or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return cfg, out


def _need(path, hint):
    if not os.path.exists(path):
        raise ConfigError(f"missing {path}; run `ocdaseg {hint}` first")
    return path


def cmd_gen_data(args):
    from ocdaseg.corpus import Corpus, build_corpus

    cfg, out = _resolve(args)
    root = os.path.join(out, "corpus")
    if os.path.exists(os.path.join(root, "manifest.json")):
        corpus = Corpus(root)
        if corpus.manifest["seed"] != cfg.seed:
            raise ConfigError(
                f"{root} was generated with seed {corpus.manifest['seed']}, "
                f"refusing to mix with seed {cfg.seed}"
            )
        print(f"corpus already present at {root}")
    else:
        corpus = build_corpus(root, cfg.corpus, cfg.seed)
        print(f"wrote corpus to {root}")
    for split in ("source_train", "target_train", "test_seen", "test_unseen"):
        print(f"  {split}: {len(corpus.ids(split))} patches")
    return 0


def cmd_train_stage1(args):
    from ocdaseg import plots
    from ocdaseg.corpus import Corpus
    from ocdaseg.stage1 import train_stage1

    cfg, out = _resolve(args)
    corpus = Corpus(_need(os.path.join(out, "corpus"), "gen-data"))
    result = train_stage1(corpus, cfg, os.path.join(out, "stage1"), seed=cfg.seed)
    plots.loss_curves(result.history, os.path.join(out, "stage1", "losses.png"),
                      title="stage-1 losses")
    plots.reliable_fraction_plot(result.events,
                                 os.path.join(out, "stage1", "reliable_fraction.png"))
    last = result.history[-1] if result.history else {}
    print(f"stage-1 done: checkpoint {result.checkpoint_path}")
    if result.events:
        print(f"  reliable fraction at last re-cluster: "
              f"{result.events[-1]['reliable_fraction']:.3f}")
    if last:
        print(f"  final losses: g_total={last['g_total']:.3f} cycle={last['cycle']:.3f}")
    return 0


def cmd_translate(args):
    from ocdaseg import plots
    from ocdaseg.corpus import Corpus
    from ocdaseg.stage1 import load_stage1_model, synthesize_translated_corpus

    cfg, out = _resolve(args)
    corpus = Corpus(_need(os.path.join(out, "corpus"), "gen-data"))
    ckpt = args.checkpoint or os.path.join(out, "stage1", "stage1.pt")
    _need(ckpt, "train-stage1")
    model, extra = load_stage1_model(ckpt, cfg.stage1.style_dim)
    randomize = cfg.stage1.style_randomization if args.mode is None else args.mode == "both"
    translated = synthesize_translated_corpus(
        model, extra, corpus, os.path.join(out, "translated"),
        seed=cfg.seed, randomize=randomize,
    )
    ids = translated.ids("train")
    gallery = [translated.load(pid).image for pid in ids[:12]]
    plots.patch_gallery(gallery, os.path.join(out, "translated", "gallery.png"),
                        titles=ids[:12])
    print(f"wrote {len(ids)} translated patches to {translated.root}")
    return 0


def cmd_train_stage2(args):
    from ocdaseg import plots
    from ocdaseg.corpus import Corpus
    from ocdaseg.stage1 import load_stage1_model
    from ocdaseg.stage2 import train_stage2

    cfg, out = _resolve(args)
    corpus = Corpus(_need(os.path.join(out, "corpus"), "gen-data"))
    translated = Corpus(_need(os.path.join(out, "translated"), "translate"))
    ckpt = args.checkpoint or os.path.join(out, "stage1", "stage1.pt")
    _need(ckpt, "train-stage1")
    _, extra = load_stage1_model(ckpt, cfg.stage1.style_dim)
    result = train_stage2(
        translated.load_split("train"), corpus.load_split("target_train"),
        {k: int(v) for k, v in extra.get("subdomain_labels", {}).items()},
        cfg, os.path.join(out, "stage2"), seed=cfg.seed,
        num_subdomains=cfg.stage1.num_subdomains, synth_cfg=cfg.corpus.synth,
    )
    plots.loss_curves(result.history, os.path.join(out, "stage2", "losses.png"),
                      title="stage-2 losses")
    print(f"stage-2 done: checkpoint {result.checkpoint_path}")
    if result.history:
        print(f"  final losses: total={result.history[-1]['total']:.3f}")
    return 0


def cmd_evaluate(args):
    from ocdaseg.corpus import Corpus
    from ocdaseg.metrics import MetricsReport
    from ocdaseg.stage2 import load_stage2_model, segment_split
    from ocdaseg.torchutil import seed_everything, stable_hash
    import dataclasses

    cfg, out = _resolve(args)
    corpus = Corpus(_need(os.path.join(out, "corpus"), "gen-data"))
    ckpt = args.checkpoint or os.path.join(out, "stage2", "stage2.pt")
    _need(ckpt, "train-stage2")
    model, _ = load_stage2_model(ckpt)
    seed_everything(cfg.seed)
    splits = ["test_seen", "test_unseen"] if args.mode == "both" else [args.mode]
    for split in splits:
        ids, preds, gts = segment_split(model, corpus, split, cfg)
        report = MetricsReport.from_images(
            ids, preds, gts,
            meta={"split": split, "seed": cfg.seed, "ablation": "none",
                  "config": stable_hash(dataclasses.asdict(cfg))},
        )
        report.write_json(os.path.join(out, f"metrics_{split}.json"))
        report.write_csv(os.path.join(out, f"metrics_{split}.csv"))
        m = report.mean
        print(f"{split}: dice={m['dice']:.4f} aji={m['aji']:.4f} "
              f"dq={m['dq']:.4f} sq={m['sq']:.4f} pq={m['pq']:.4f}")
    return 0


def cmd_ablate(args):
    from ocdaseg import plots
    from ocdaseg.pipeline import ABLATIONS, run_ablation_suite

    cfg, out = _resolve(args)
    axes = None
    if args.axes:
        axes = [a.strip() for a in args.axes.split(",") if a.strip()]
        bad = {a for a in axes if not a.isdigit()} - set(ABLATIONS)
        if bad:
            raise ConfigError(
                f"unknown ablation axes {sorted(bad)}; valid: {ABLATIONS} "
                "or integers to sweep the subdomain count K"
            )
    root = os.path.join(out, "ablations")
    table = run_ablation_suite(cfg, root, axes=axes, seed=cfg.seed,
                               cache_root=os.path.join(out, "cache"))
    plots.ablation_bars(table, os.path.join(root, "ablation_pq.png"))
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "translate": cmd_translate,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e} (state dumped to {e.dump_path})", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
