import argparse
import logging
import sys
from importlib.metadata import version, PackageNotFoundError
from pathlib import Path
from typing import List, Optional

from rich.logging import RichHandler

from .core import MotifCDR
from .encoder import Task
from .errors import MotifCDRError, StageError
from .synth import SynthSpec, generate, write_dataset


def _user_ids(value: str) -> List[int]:
    path = Path(value)
    tokens = path.read_text(encoding="utf-8").split() if path.is_file() else value.split(",")
    try:
        return [int(t) for t in tokens if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"user ids must be integers: {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    try:
        __version__ = version("motif-cdr")
    except PackageNotFoundError:
        __version__ = "unknown"

    parser = argparse.ArgumentParser(prog="motif-cdr",
                                     description="Motif-based prompt learning for cross-domain recommendation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--debug", "-d", action="store_true")
    parser.add_argument("--config", help="Config file path")
    parser.add_argument("--threads", type=int, help="Worker threads (1 is the reproducibility reference)")
    parser.add_argument("--no-progress", action="store_true", help="Plain log lines instead of progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="Load the interaction files and overlap map and summarize them")

    synth = sub.add_parser("synth", help="Generate a planted-cluster synthetic dataset")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--clusters", type=int, default=4)
    synth.add_argument("--users", type=int, default=500, help="Users per domain")
    synth.add_argument("--items", type=int, default=300, help="Items per domain")
    synth.add_argument("--domains", type=int, default=2)
    synth.add_argument("--overlap", type=float, default=0.2, help="Fraction of users shared by domains 0 and 1")
    synth.add_argument("--overlap-users", type=int, help="Exact number of shared users (overrides --overlap)")
    synth.add_argument("--noise", type=float, default=0.1, help="Share of out-of-cluster interactions")
    synth.add_argument("--min-interactions", type=int, default=5)
    synth.add_argument("--max-interactions", type=int, default=20)
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--eval-negatives", type=int, default=99)

    sub.add_parser("sample-motifs", help="Sample and write every domain's motifs")
    sub.add_parser("pretrain", help="Pre-train the motif-based encoder")

    tune = sub.add_parser("prompt-tune", help="Tune one domain's prompts on a pre-trained checkpoint")
    tune.add_argument("--checkpoint", help="Pre-trained checkpoint (default: <output>/checkpoints/pretrained.ckpt)")
    tune.add_argument("--domain", type=int, required=True)
    tune.add_argument("--task", choices=[t.value for t in Task], default=Task.INTRA.value)

    evaluate = sub.add_parser("evaluate", help="HR@K / NDCG@K on the held-out test split")
    evaluate.add_argument("--checkpoint", help="Checkpoint (default: the tuned one for domain and task)")
    evaluate.add_argument("--domain", type=int, required=True)
    evaluate.add_argument("--task", choices=[t.value for t in Task], default=Task.INTRA.value)

    rec = sub.add_parser("recommend", help="Export top-K items for users of one domain")
    rec.add_argument("--checkpoint", required=True, help="Tuned checkpoint")
    rec.add_argument("--domain", type=int, required=True)
    rec.add_argument("--users", type=_user_ids, required=True, help="Comma-separated local user ids or a file")
    rec.add_argument("--k", type=int, default=10)
    rec.add_argument("--output", help="Output TSV (default: <output>/recommendations_d<domain>.tsv)")

    sub.add_parser("pipeline", help="ingest, sample, pretrain, prompt-tune every task and evaluate")
    return parser


def run_synth(args: argparse.Namespace):
    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True
    )
    spec = SynthSpec(
        clusters=args.clusters, users=args.users, items=args.items, domains=args.domains,
        overlap=args.overlap, noise=args.noise, min_interactions=args.min_interactions,
        max_interactions=args.max_interactions, seed=args.seed, overlap_users=args.overlap_users,
    )
    paths = write_dataset(generate(spec), args.out, eval_negatives=args.eval_negatives)
    print(f"Config written to {paths['config']}")


def run_command(args: argparse.Namespace):
    if args.command == "synth":
        run_synth(args)
        return

    app = MotifCDR(config_path=args.config, debug=args.debug, threads=args.threads,
                   progress=not args.no_progress)
    if args.command == "ingest":
        app.ingest()
    elif args.command == "sample-motifs":
        app.sample_motifs(app.load())
    elif args.command == "pretrain":
        app.pretrain(app.load())
    elif args.command == "prompt-tune":
        split = app.load()
        path = args.checkpoint or app.output_dir / "checkpoints" / "pretrained.ckpt"
        app.prompt_tune(split, app.load_checkpoint(path, "prompt-tune"), args.domain, Task(args.task))
    elif args.command == "evaluate":
        split = app.load()
        path = args.checkpoint or app.tuned_path(args.domain, Task(args.task))
        report = app.evaluate(split, app.load_checkpoint(path, "evaluate"), args.domain, Task(args.task))
        print(report.table())
        print(report.line())
    elif args.command == "recommend":
        app.recommend(args.checkpoint, args.domain, args.users, args.k, args.output)
    elif args.command == "pipeline":
        app.run()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_command(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MotifCDRError as e:
        print(f"error: [{args.command}] {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
