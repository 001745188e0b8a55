"""Command line entry point: ``apk <subcommand> [options]``.

Exit codes: 0 success, 1 user error (bad flags, config or input files),
2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .config import RunConfig, dump_config, load_config
from .corpus import CorpusError
from .knowledge import KnowledgeGenerator, ValidationError, build_knowledge
from .llm import BackendError, ResponseCache
from .retrieval import ENRICHMENT_MODES, RerankConfig, evaluate, retrieve_text
from .substrate import ConfigError

log = logging.getLogger("apk")

USER_ERRORS = (ConfigError, ValidationError, CorpusError, BackendError, FileNotFoundError, IsADirectoryError)


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="F", help="YAML run configuration (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="random seed; overrides the config's seed")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration with provenance comments and exit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apk", description="Action-knowledge prompted retrieval on a miniature CLIP.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-corpus", help="render the synthetic corpus")
    _common(p)
    p.add_argument("--out", metavar="D", help="corpus directory (default: paths.corpus)")
    for split in ("train", "val", "test"):
        p.add_argument(f"--{split}", type=int, metavar="N", help=f"{split} items (default: corpus.{split})")

    p = sub.add_parser("gen-knowledge", help="annotate captions with action triplets and state descriptions")
    _common(p)
    p.add_argument("--captions", metavar="F", help="JSON-lines captions (default: paths.captions)")
    p.add_argument("--out", metavar="F", help="knowledge sidecar (default: paths.knowledge)")
    p.add_argument("--backend", choices=("mock", "http"), help="LLM backend (default: llm.backend)")
    p.add_argument("--parallelism", type=int, metavar="N", help="concurrent requests (default: llm.parallelism)")

    p = sub.add_parser("train", help="train the backbone warmup and/or the prompt stages")
    _common(p)
    p.add_argument("--stage", choices=("0", "1", "2", "all"), default="all")
    p.add_argument("--out", metavar="D", help="run directory (default: paths.runs)")
    p.add_argument("--warmup-checkpoint", metavar="F", help="backbone for stage 1 (default: OUT/warmup0-best.ckpt)")
    p.add_argument("--resume", metavar="F", help="stage-1 checkpoint for stage 2 (default: OUT/stage1-best.ckpt)")
    p.add_argument("--compare", action="append", choices=("one-stage", "combined"), default=[],
                   help="with --stage all, also train this baseline (repeatable)")

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="F")
    p.add_argument("--corpus", metavar="D", help="corpus directory (default: paths.corpus)")
    p.add_argument("--knowledge", metavar="F", help="knowledge sidecar (default: paths.knowledge)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--k", type=int, help="re-ranking depth (default: rerank.k)")
    p.add_argument("--enrichment", choices=ENRICHMENT_MODES, help="text enrichment (default: rerank.enrichment)")
    p.add_argument("--shared-image-feature", action="store_true",
                   help="condition each query image once, on its top-1 candidate")
    p.add_argument("--lam", type=float, help="fusion weight override")
    p.add_argument("--report", metavar="F", help="write the JSON report here")

    p = sub.add_parser("retrieve", help="rank a split's images for a free-text query")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="F")
    p.add_argument("--query", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--corpus", metavar="D")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("inspect", help="parameter groups and fusion attention of one item")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="F")
    p.add_argument("--corpus", metavar="D")
    p.add_argument("--knowledge", metavar="F")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, default=0, help="caption index within the split")
    p.add_argument("--trace-out", metavar="F", help="write the fusion trace (attention numbers) here")

    p = sub.add_parser("ablate", help="run ablation suites and print comparison tables")
    _common(p)
    p.add_argument("--suite", action="append", choices=("prompts", "aim", "stages", "lambda", "all"),
                   help="suite to run (repeatable; default: all)")
    p.add_argument("--out", metavar="D", help="ablation directory (default: paths.runs/ablate)")
    p.add_argument("--warmup-checkpoint", metavar="F", help="reuse this backbone instead of training one")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--tsv", action="store_true", help="print tab-separated tables instead of aligned text")
    return parser


# --------------------------------------------------------------------------
# subcommands


def _cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg._sources["seed"] = "flag --seed"
        cfg.validate()
    return cfg


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    from .pipeline import gen_corpus

    for split in ("train", "val", "test"):
        if getattr(args, split) is not None:
            setattr(cfg.corpus, split, getattr(args, split))
    cfg.validate()
    if args.seed is not None:
        cfg.corpus.seed = args.seed
    out = Path(args.out or cfg.paths.corpus)
    manifests = gen_corpus(cfg, out)
    counts = {s: len(v) for s, v in manifests.items()}
    print(f"wrote {sum(counts.values())} images to {out} ({', '.join(f'{s}={n}' for s, n in counts.items())})")
    return 0


def cmd_gen_knowledge(cfg: RunConfig, args) -> int:
    from .pipeline import gen_knowledge

    if args.backend:
        cfg.llm.backend = args.backend
    if args.parallelism is not None:
        cfg.llm.parallelism = args.parallelism
    cfg.validate()
    out = args.out or cfg.paths.knowledge
    summary = gen_knowledge(cfg, args.captions, out)
    print(json.dumps({"out": str(out), **summary.as_dict()}, sort_keys=True))
    if summary.failure_fraction > 0.5:
        log.error("more than half of the captions failed")
        return 1
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .model import ActionPromptModel
    from .pipeline import FULL, evaluate_run, load_data, train_variant, train_warmup, warmup_result
    from .training import TrainingLog, run_stage

    out = Path(args.out or cfg.paths.runs)
    data = load_data(cfg)
    warm = Path(args.warmup_checkpoint or out / "warmup0-best.ckpt")
    if args.stage in ("0", "all"):
        model, res = train_warmup(cfg, data, out)
        print(f"stage 0: best val Rsum {res.best_rsum:.1f} at epoch {res.best_epoch} -> {res.checkpoint}")
        warm = res.checkpoint
    if args.stage == "1":
        _need(warm, "warmup checkpoint")
        torch.manual_seed(cfg.seed)
        model = ActionPromptModel.load(warm, groups=sorted(_backbone_groups()), prompts=cfg.prompts, aim=cfg.aim)
        res = run_stage(cfg.train.stage1.plan("stage1"), model, data.train, data.knowledge, data.val, out,
                        cfg.seed, cfg.train.triplet, cfg.rerank, TrainingLog(path=out / "training.log"))
        print(f"stage 1: best val Rsum {res.best_rsum:.1f} at epoch {res.best_epoch} -> {res.checkpoint}")
    if args.stage == "2":
        resume = Path(args.resume or out / "stage1-best.ckpt")
        _need(resume, "stage-1 checkpoint")
        torch.manual_seed(cfg.seed)
        model = ActionPromptModel.load(resume)
        res = run_stage(cfg.train.stage2.plan("stage2"), model, data.train, data.knowledge, data.val, out,
                        cfg.seed + 1, cfg.train.triplet, cfg.rerank, TrainingLog(path=out / "training.log"))
        print(f"stage 2: best val Rsum {res.best_rsum:.1f} at epoch {res.best_epoch} -> {res.checkpoint}")
    if args.stage == "all":
        base = warmup_result(ActionPromptModel.load(warm), data, cfg)
        run = train_variant(cfg, data, warm, out, FULL, "two-stage")
        result = evaluate_run(run, data)
        result.write(out / "report.json")
        print(f"warmup backbone (test): {base.summary()}")
        print(f"two-stage (test): {result.summary()}")
        for mode in args.compare:
            other = train_variant(cfg, data, warm, out / mode, FULL, mode)
            print(f"{mode} (test): {evaluate_run(other, data).summary()}")
        print(f"final checkpoint: {run.checkpoint}")
    return 0


def _backbone_groups():
    from .pipeline import BACKBONE_GROUPS

    return BACKBONE_GROUPS


def _need(path: Path, what: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _rerank_cfg(cfg: RunConfig, args) -> RerankConfig:
    r = dataclasses.replace(cfg.rerank)
    if getattr(args, "k", None) is not None:
        r.k = args.k
    if getattr(args, "enrichment", None):
        r.enrichment = args.enrichment
    if getattr(args, "shared_image_feature", False):
        r.shared_image_feature = True
    r.validate()
    return r


def cmd_eval(cfg: RunConfig, args) -> int:
    from .corpus import load_split
    from .knowledge import load_knowledge
    from .model import ActionPromptModel

    _need(Path(args.checkpoint), "checkpoint")
    model = ActionPromptModel.load(args.checkpoint)
    split = load_split(args.corpus or cfg.paths.corpus, args.split, model.vision_cfg.image_size)
    knowledge = load_knowledge(args.knowledge or cfg.paths.knowledge)
    rerank = _rerank_cfg(cfg, args)
    rerank.validate(min(len(split.image_ids), len(split.captions)))
    result = evaluate(model, split, knowledge, rerank, args.lam)
    print(result.summary())
    print(f"run id {result.run_id()}")
    if args.report:
        result.write(args.report)
    return 0


def cmd_retrieve(cfg: RunConfig, args) -> int:
    from .corpus import load_split
    from .model import ActionPromptModel

    _need(Path(args.checkpoint), "checkpoint")
    model = ActionPromptModel.load(args.checkpoint)
    split = load_split(args.corpus or cfg.paths.corpus, args.split, model.vision_cfg.image_size)
    gen = KnowledgeGenerator(cfg.llm.backend_instance(), ResponseCache(cfg.paths.llm_cache))
    rec = build_knowledge("query", args.query, gen)
    for rank, (image_id, score) in enumerate(retrieve_text(model, split, args.query, rec, cfg.rerank,
                                                           args.topk), 1):
        print(f"{rank}\t{image_id}\t{score:.4f}")
    return 0


def cmd_inspect(cfg: RunConfig, args) -> int:
    from .corpus import load_split
    from .knowledge import load_knowledge
    from .model import ActionPromptModel
    from .substrate import group_digests

    _need(Path(args.checkpoint), "checkpoint")
    model = ActionPromptModel.load(args.checkpoint)
    groups = model.param_groups()
    digests = group_digests(groups)
    for name, g in groups.items():
        n = sum(p.numel() for p in g.parameters.values())
        print(f"{name:18s} params={n:7d} frozen={str(g.frozen).lower():5s} sha256={digests[name][:16]}")
    split = load_split(args.corpus or cfg.paths.corpus, args.split, model.vision_cfg.image_size)
    if not 0 <= args.index < len(split):
        raise ValidationError(f"--index must lie in [0, {len(split)})")
    knowledge = load_knowledge(args.knowledge or cfg.paths.knowledge)
    cid = split.caption_ids[args.index]
    rec = knowledge.get(cid)
    if rec is None:
        raise ValidationError(f"no knowledge for caption {cid}")
    print(f"caption {cid}: {rec.caption}")
    for t, s in zip(rec.triplets, rec.state_descriptions):
        print(f"  {t.render()} :: {s}")
    if not model.aim_cfg.enabled:
        print("interaction module disabled; no fusion trace")
        return 0
    model.eval()
    with torch.no_grad():
        img = torch.from_numpy(split.images[split.caption_image[args.index]][None])
        _, trace = model.encode_image_prompted(model.patch_embed(img), model.knowledge_inputs([rec]),
                                               return_trace=True)
    rows = trace.A_combined[0]
    print(f"combined attention: {tuple(rows.shape)} rows, row sums in "
          f"[{float(rows.sum(-1).min()):.6f}, {float(rows.sum(-1).max()):.6f}]")
    if args.trace_out:
        trace.dump(args.trace_out)
        print(f"trace written to {args.trace_out}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .ablation import SUITES, Ablation
    from .pipeline import load_data, train_warmup

    suites: List[str] = args.suite or ["all"]
    if "all" in suites:
        suites = list(SUITES)
    out = Path(args.out or Path(cfg.paths.runs) / "ablate")
    data = load_data(cfg)
    warm = args.warmup_checkpoint
    if warm is None:
        _, res = train_warmup(cfg, data, out / "warmup")
        warm = res.checkpoint
    _need(Path(warm), "warmup checkpoint")
    ab = Ablation(cfg, data, warm, out, args.split)
    for name in dict.fromkeys(suites):
        table = ab.suite(name)
        (out / f"{name}.tsv").write_text(table.tsv(), encoding="utf-8")
        print(table.tsv() if args.tsv else table.pretty(), flush=True)
    return 0


COMMANDS = {"gen-corpus": cmd_gen_corpus, "gen-knowledge": cmd_gen_knowledge, "train": cmd_train,
            "eval": cmd_eval, "retrieve": cmd_retrieve, "inspect": cmd_inspect, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _cfg(args)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](cfg, args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort classification for the exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
