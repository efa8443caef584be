"""Command-line front end tying the pipeline together.

Subcommands: gen-dataset, train-mle, train-rl, eval, synth, show-masks.
Every run writes a <out>.manifest.json recording the arguments, seeds,
config hashes, and artifact digests needed to reproduce it bit-exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, evaluation, lang, oracle, search, train, vm
from .datagen import GenConfig
from .model import ModelConfig, ModeError, SynthModel
from .nn.checkpoint import sha256_file


def _load_config_file(path: Path) -> dict:
    text = path.read_bytes()
    if path.suffix == ".toml":
        try:
            import tomllib  # python >= 3.11
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(text.decode("utf-8"))
    return json.loads(text)


def write_manifest(out_path, command: str, args: dict, artifacts: dict) -> Path:
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(args.items())},
        "alphabet_sha256": lang.alphabet_sha256(),
        "artifacts": {
            name: {"path": str(p), "sha256": sha256_file(p)}
            for name, p in artifacts.items()
        },
    }
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _gen_config(args) -> GenConfig:
    if args.config is not None:
        return GenConfig.from_json(_load_config_file(Path(args.config)))
    if args.preset == "mini":
        return GenConfig.mini()
    return GenConfig()


def cmd_gen_dataset(args) -> int:
    cfg = _gen_config(args)
    out = Path(args.out)

    def progress(done, total):
        print(f"  {done}/{total} samples", file=sys.stderr)

    datagen.build_dataset(args.count, cfg, args.seed, out, heldout=args.heldout,
                          progress=progress if args.verbose else None)
    write_manifest(out, "gen-dataset",
                   {"count": args.count, "seed": args.seed, "heldout": args.heldout,
                    "config": cfg.to_json(), "config_sha256": cfg.config_sha256()},
                   {"dataset": out})
    print(f"wrote {out}")
    return 0


def _model_config(args, syntax: str) -> ModelConfig:
    if args.model_preset == "mini":
        return ModelConfig.mini(syntax)
    return ModelConfig.full(syntax)


def cmd_train_mle(args) -> int:
    header, samples = datagen.read_dataset(args.dataset)
    train_samples = [s for s in samples if s.split == "train"]
    val_samples = [s for s in samples if s.split == "val"]
    if not train_samples:
        print("error: dataset contains no training samples", file=sys.stderr)
        return 2
    cfg = _model_config(args, args.syntax)
    model = SynthModel(cfg, seed=args.seed)
    options = train.MleOptions(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        w_syntax=args.w_syntax, seed=args.seed, eval_every=args.eval_every,
        eval_beam=args.eval_beam, eval_limit=args.eval_limit,
        patience=args.patience, target_top1=args.target_top1,
        max_seconds=None if args.max_hours is None else args.max_hours * 3600.0,
        max_len=args.max_len)
    log = train.TrainLog(args.log)
    result = train.train_mle(model, train_samples, val_samples, options, log)
    log.close()
    out = Path(args.out)
    model.save(out)
    artifacts = {"checkpoint": out, "sidecar": Path(str(out) + ".json")}
    if args.log:
        artifacts["log"] = Path(args.log)
    write_manifest(out, "train-mle",
                   {"dataset": str(args.dataset),
                    "dataset_config_sha256": header.get("config_sha256"),
                    "syntax": args.syntax, "epochs": args.epochs,
                    "batch": args.batch, "lr": args.lr, "w_syntax": args.w_syntax,
                    "seed": args.seed, "model_config": cfg.to_json(),
                    "stopped": result.stopped, "steps": result.steps,
                    "best_val_top1": result.best_val_top1},
                   artifacts)
    print(f"trained {result.steps} steps ({result.stopped}); wrote {out}")
    return 0


def cmd_train_rl(args) -> int:
    model = SynthModel.load(args.init)
    header, samples = datagen.read_dataset(args.dataset)
    train_samples = [s for s in samples if s.split == "train"]
    if not train_samples:
        print("error: dataset contains no training samples", file=sys.stderr)
        return 2
    options = train.RlOptions(
        objective=args.objective, steps=args.steps, batch_size=args.batch,
        lr=args.lr, beam_size=args.beam, rollouts=args.rollouts,
        bag_c=args.bag, seed=args.seed, max_len=args.max_len,
        max_seconds=None if args.max_hours is None else args.max_hours * 3600.0)
    log = train.TrainLog(args.log)
    result = train.train_rl(model, train_samples, options, log)
    log.close()
    out = Path(args.out)
    model.save(out)
    artifacts = {"checkpoint": out, "sidecar": Path(str(out) + ".json")}
    if args.log:
        artifacts["log"] = Path(args.log)
    write_manifest(out, "train-rl",
                   {"init": str(args.init), "init_sha256": sha256_file(args.init),
                    "dataset": str(args.dataset), "objective": args.objective,
                    "steps": args.steps, "batch": args.batch, "beam": args.beam,
                    "rollouts": args.rollouts, "bag": args.bag, "lr": args.lr,
                    "seed": args.seed,
                    "final_mean_reward":
                        result.mean_rewards[-1] if result.mean_rewards else None},
                   artifacts)
    print(f"fine-tuned {result.steps} steps; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    model = SynthModel.load(args.ckpt)
    _, samples = datagen.read_dataset(args.dataset, splits=(args.split,))
    if args.limit:
        samples = samples[:args.limit]
    ks = tuple(int(k) for k in args.topk.split(","))
    report = evaluation.evaluate(model, samples, ks=ks, beam_size=args.beam,
                                 max_len=args.max_len,
                                 apply_learned_syntax=not args.no_learned_syntax)
    out = Path(args.out)
    report.write_csv(out)
    summary_path = Path(str(out) + ".summary.json")
    report.write_summary(summary_path)
    write_manifest(out, "eval",
                   {"ckpt": str(args.ckpt), "ckpt_sha256": sha256_file(args.ckpt),
                    "dataset": str(args.dataset), "split": args.split,
                    "topk": list(ks), "beam": args.beam, "limit": args.limit,
                    "apply_learned_syntax": not args.no_learned_syntax},
                   {"csv": out, "summary": summary_path})
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    model = SynthModel.load(args.ckpt)
    spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    examples = spec["examples"]
    pairs = [(vm.Grid.from_json(ex["input"]), vm.Grid.from_json(ex["output"]))
             for ex in examples]
    spec_pairs = pairs[:datagen.SPEC_PAIRS]
    held_out = pairs[datagen.SPEC_PAIRS] if len(pairs) > datagen.SPEC_PAIRS else None
    try:
        ranked = search.synthesize(model, spec_pairs, args.beam, args.max_len,
                                   prune=args.prune, held_out=held_out)
    except (search.NoCandidateError, search.NoCompleteProgramError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    payload = {"candidates": [c.to_json() for c in ranked]}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        write_manifest(Path(args.out), "synth",
                       {"ckpt": str(args.ckpt), "ckpt_sha256": sha256_file(args.ckpt),
                        "spec": str(args.spec), "beam": args.beam,
                        "prune": args.prune},
                       {"candidates": Path(args.out)})
    else:
        print(text)
    return 0


# -- mask comparison export ------------------------------------------------------


def _svg_heatmap(matrix: np.ndarray, colors: dict, path: Path, cell: int = 10) -> None:
    rows, cols = matrix.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{cols * cell}" height="{rows * cell}">']
    for r in range(rows):
        for c in range(cols):
            fill = colors[int(matrix[r, c])]
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" '
                         f'height="{cell}" fill="{fill}" stroke="#ddd" '
                         f'stroke-width="0.5"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


def _write_mask_csv(matrix: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(lang.TOKENS) + "\n")
        for row in matrix:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def cmd_show_masks(args) -> int:
    model = SynthModel.load(args.ckpt)
    if model.cfg.syntax_mode != "learned":
        print("error: show-masks needs a learned-syntax checkpoint", file=sys.stderr)
        return 2
    tokens = lang.tokenize(Path(args.program).read_text(encoding="utf-8"))
    if not lang.parses(tokens):
        print("error: program does not parse", file=sys.stderr)
        return 2
    steps = len(tokens)

    manual = np.zeros((steps, lang.ALPHABET_SIZE), dtype=int)
    state = oracle.init()
    for t, tid in enumerate(tokens):
        manual[t] = oracle.valid_next(state).allowed.astype(int)
        state = oracle.advance(state, tid)

    learned = np.zeros_like(manual)
    syn_state = None
    prev = None
    for t, tid in enumerate(tokens):
        penalties, syn_state = model.syntax_step(syn_state, prev)
        learned[t] = (np.abs(penalties) < args.threshold).astype(int)
        prev = tid

    # 0 agree, +1 learned permits where the checker forbids (recoverable),
    # -1 learned forbids where the checker permits (unrecoverable).
    diff = np.zeros_like(manual)
    diff[(learned == 1) & (manual == 0)] = 1
    diff[(learned == 0) & (manual == 1)] = -1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bw = {0: "#333333", 1: "#ffffff"}
    trio = {0: "#ffffff", 1: "#4a90d9", -1: "#d94a4a"}
    _write_mask_csv(manual, out_dir / "manual.csv")
    _write_mask_csv(learned, out_dir / "learned.csv")
    _write_mask_csv(diff, out_dir / "diff.csv")
    _svg_heatmap(manual, bw, out_dir / "manual.svg")
    _svg_heatmap(learned, bw, out_dir / "learned.svg")
    _svg_heatmap(diff, trio, out_dir / "diff.svg")
    write_manifest(out_dir / "masks", "show-masks",
                   {"ckpt": str(args.ckpt), "ckpt_sha256": sha256_file(args.ckpt),
                    "program": str(args.program), "threshold": args.threshold},
                   {name: out_dir / name for name in
                    ("manual.csv", "learned.csv", "diff.csv",
                     "manual.svg", "learned.svg", "diff.svg")})
    print(f"wrote mask comparison to {out_dir}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="karelsynth",
        description="Neural program synthesis for the Karel gridworld DSL")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="generate a synthetic dataset")
    g.add_argument("--count", type=int, required=True, help="training samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--heldout", type=int, default=0,
                   help="extra samples split evenly into val/test")
    g.add_argument("--config", default=None, help="GenConfig JSON or TOML file")
    g.add_argument("--preset", choices=("default", "mini"), default="default")
    g.add_argument("--out", required=True)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train-mle", help="supervised training")
    t.add_argument("--dataset", required=True)
    t.add_argument("--syntax", choices=("none", "handwritten", "learned", "large"),
                   default="none")
    t.add_argument("--model-preset", choices=("full", "mini"), default="full")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--w-syntax", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--eval-beam", type=int, default=16)
    t.add_argument("--eval-limit", type=int, default=100)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--target-top1", type=float, default=None)
    t.add_argument("--max-hours", type=float, default=None)
    t.add_argument("--max-len", type=int, default=search.DEFAULT_MAX_LEN)
    t.add_argument("--log", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_mle)

    r = sub.add_parser("train-rl", help="RL fine-tuning from a checkpoint")
    r.add_argument("--init", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--objective", choices=train.RL_OBJECTIVES, default="beam")
    r.add_argument("--steps", type=int, default=100)
    r.add_argument("--batch", type=int, default=16)
    r.add_argument("--beam", type=int, default=64)
    r.add_argument("--rollouts", type=int, default=100)
    r.add_argument("--bag", type=int, default=5)
    r.add_argument("--lr", type=float, default=1e-4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max-len", type=int, default=search.DEFAULT_MAX_LEN)
    r.add_argument("--max-hours", type=float, default=None)
    r.add_argument("--log", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_train_rl)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--topk", default="1,5,50")
    e.add_argument("--beam", type=int, default=64)
    e.add_argument("--max-len", type=int, default=search.DEFAULT_MAX_LEN)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--no-learned-syntax", action="store_true",
                   help="ablate learned penalties at decode time")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="synthesize programs for a specification")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--spec", required=True, help="JSON file with IO examples")
    s.add_argument("--beam", type=int, default=64)
    s.add_argument("--max-len", type=int, default=search.DEFAULT_MAX_LEN)
    s.add_argument("--prune", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("show-masks", help="export checker vs learned masks")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--program", required=True, help="token text file")
    m.add_argument("--threshold", type=float, default=5.0,
                   help="penalty magnitude treated as forbidden")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_show_masks)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ModeError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
