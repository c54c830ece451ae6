"""Command-line entry point: ``lesionsynth <command> [options]``.

Config files hold one ``key = value`` pair per line (``#`` starts a
comment). Keys are option names with dashes or underscores; values are
parsed as JSON when possible and kept as strings otherwise. A flag given
on the command line beats the file, which beats the built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("lesionsynth")

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE = 0, 1, 2
GLOBAL_DEFAULTS = {"seed": 0, "out": "runs/latest", "config": None, "log_level": "INFO"}
# checked after merging the config file, so these may come from either place
REQUIRED = {
    "enrich": ("manifest",),
    "finetune": ("manifest",),
    "generate": ("checkpoint", "klass", "count"),
    "evaluate-gen": ("real_train", "real_test", "synth"),
    "train-cls": ("real",),
    "train-seg": ("real",),
    "eval-robust": ("models", "external"),
    "report": (),
}


class CliError(Exception):
    """Bad user input; reported as one line and exit code 1."""


# ------------------------------------------------------------------ config


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


@dataclass
class RunStamp:
    command: str
    config: dict
    version: str = __version__
    seeds: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    inputs: dict = field(default_factory=dict)
    platform: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)

    def add_input(self, name: str, path) -> None:
        p = Path(path)
        if p.is_file():
            self.inputs[name] = {"path": str(p.resolve()), "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
        elif p.is_dir() and (p / "metadata.json").is_file():
            self.inputs[name] = {
                "path": str(p.resolve()),
                "sha256": hashlib.sha256((p / "metadata.json").read_bytes()).hexdigest(),
            }
        else:
            self.inputs[name] = {"path": str(p), "sha256": None}

    def write(self, out_dir) -> Path:
        import torch

        self.finished = time.time()
        self.platform = {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "runstamp.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


# ------------------------------------------------------------------ parser


def _global(p: argparse.ArgumentParser) -> None:
    d = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=d, help="base random seed (default 0)")
    p.add_argument("--out", default=d, help="output directory (default runs/latest)")
    p.add_argument("--config", default=d, help="key = value config file")
    p.add_argument("--log-level", default=d, choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionsynth", description="Joint lesion image and mask synthesis toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("enrich", help="add LLM-written captions to a manifest")
    _global(p)
    p.add_argument("--manifest")
    p.add_argument("--endpoint", default="https://api.openai.com")
    p.add_argument("--model", default="gpt-4o-mini")
    p.add_argument("--token-env", default="LESIONSYNTH_LLM_TOKEN", help="environment variable holding the API token")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--max-concurrency", type=int, default=4)
    p.add_argument("--no-image", action="store_true", help="send only the text prompt")
    p.add_argument("--fallback-template", action="store_true", help="use the fixed generation prompt when a request fails")

    p = sub.add_parser("finetune", help="inflate the backbone, attach adapters and train")
    _global(p)
    p.add_argument("--manifest")
    p.add_argument("--backbone", choices=["tiny", "pretrained"], default="tiny")
    p.add_argument("--model-id", default=None, help="pretrained model id (pretrained backbone)")
    p.add_argument("--base", default=None, help="tiny base weights (.npz); pretrained on the manifest if omitted")
    p.add_argument("--pretrain-ae-steps", type=int, default=600)
    p.add_argument("--pretrain-denoiser-steps", type=int, default=1500)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--lambda-mask", type=float, default=1.0)
    p.add_argument("--lambda-dice", type=float, default=1.0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--num-workers", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    p = sub.add_parser("generate", help="sample image/mask pairs from a fine-tuned checkpoint")
    _global(p)
    p.add_argument("--checkpoint")
    p.add_argument("--class", dest="klass", action="append", help="category; repeatable")
    p.add_argument("--count", type=int, action="append", help="samples per --class")
    p.add_argument("--steps", type=int, default=45)
    p.add_argument("--guidance", type=float, default=1.22)
    p.add_argument("--resolution", type=int, default=512)

    p = sub.add_parser("evaluate-gen", help="FID / LPIPS / MS-SSIM between image sets")
    _global(p)
    p.add_argument("--real-train")
    p.add_argument("--real-test")
    p.add_argument("--synth")
    p.add_argument("--extractor", choices=["toy", "pretrained"], default="toy")
    p.add_argument("--size", type=int, default=None, help="resize images to SIZE before scoring")
    p.add_argument("--ms-ssim-scales", type=int, default=5)
    p.add_argument("--max-pairs", type=int, default=256)

    for name, task in (("train-cls", "classification"), ("train-seg", "segmentation")):
        p = sub.add_parser(name, help=f"k-fold {task} on real/synthetic/hybrid data")
        _global(p)
        p.add_argument("--real")
        p.add_argument("--synth", default=None)
        p.add_argument("--arch", action="append", default=None, help="registry name; repeatable")
        p.add_argument("--condition", action="append", default=None, choices=["real", "synth", "hybrid"])
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--input-size", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--no-augment", action="store_true")
        p.set_defaults(task=task)

    p = sub.add_parser("eval-robust", help="evaluate trained models on an external test set")
    _global(p)
    p.add_argument("--models", help="output directory of train-cls or train-seg")
    p.add_argument("--external")
    p.add_argument("--label-map", default=None, help="JSON object mapping external to training categories")

    p = sub.add_parser("report", help="render saved reports as markdown with deltas")
    _global(p)
    p.add_argument("inputs", nargs="+", help="report JSON files")
    p.add_argument("--baseline", default=None)
    return parser


def resolve_args(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    supplied = vars(args)
    cfg_path = supplied.get("config") or None
    file_values = parse_config_file(cfg_path) if cfg_path else {}
    sub_defaults = {}
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    for action in sub._actions:
        if action.dest not in ("help",) and action.default is not argparse.SUPPRESS:
            sub_defaults[action.dest] = action.default
    known = set(sub_defaults) | set(GLOBAL_DEFAULTS) | {"class"}
    unknown = set(file_values) - known
    if unknown:
        raise CliError(f"config keys not understood by {args.command!r}: {sorted(unknown)}")
    if "class" in file_values:
        file_values["klass"] = file_values.pop("class")
    # precedence: explicit flag > config file > default
    explicit = _explicit_dests(parser, sub, argv)
    resolved = {**GLOBAL_DEFAULTS, **sub_defaults}
    for k, v in file_values.items():
        resolved[k] = v
    for k, v in supplied.items():
        if k in explicit or k not in resolved:
            resolved[k] = v
    resolved["command"] = args.command
    missing = [k for k in REQUIRED[args.command] if resolved.get(k) in (None, [])]
    if missing:
        names = ", ".join("--" + ("class" if k == "klass" else k.replace("_", "-")) for k in missing)
        sub.error(f"missing required option(s): {names}")
    for action in sub._actions:
        if isinstance(action, argparse._AppendAction):
            v = resolved.get(action.dest)
            if v is not None and not isinstance(v, list):
                resolved[action.dest] = [v]
    return argparse.Namespace(**resolved)


def _explicit_dests(parser, sub, argv) -> set:
    flags = {}
    for p in (parser, sub):
        for a in p._actions:
            for s in a.option_strings:
                flags[s] = a.dest
    out = set()
    for tok in argv:
        name = tok.split("=", 1)[0]
        if name in flags:
            out.add(flags[name])
    # positionals are always explicit
    out.update(a.dest for a in sub._actions if not a.option_strings)
    return out


# --------------------------------------------------------------- commands


def _load_manifest(path):
    from .data import ManifestError, load_manifest

    try:
        return load_manifest(path)
    except ManifestError as exc:
        raise CliError(str(exc)) from None


def cmd_enrich(a, stamp: RunStamp) -> None:
    from dataclasses import replace

    from .captions import CaptionClient, CaptionRequest, LlmClientConfig, LlmServiceError, RejectedResponseError
    from .data import DatasetManifest, save_manifest

    m = _load_manifest(a.manifest)
    stamp.add_input("manifest", a.manifest)
    out = Path(a.out)
    try:
        cfg = LlmClientConfig(
            endpoint=a.endpoint,
            model=a.model,
            token_env=a.token_env,
            cache_dir=Path(a.cache_dir) if a.cache_dir else out / "caption_cache",
            send_image=not a.no_image,
            max_concurrency=int(a.max_concurrency),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    client = CaptionClient(cfg)
    reqs = [CaptionRequest(r.category, m.root / r.image) for r in m.records]
    try:
        captions = client.enrich_many(reqs, fallback=bool(a.fallback_template))
    except (LlmServiceError, RejectedResponseError) as exc:
        raise CliError(f"{exc} (pass --fallback-template to fall back to the fixed prompt)") from None
    records = tuple(replace(r, caption=c, image=str((m.root / r.image).resolve()), mask=str((m.root / r.mask).resolve())) for r, c in zip(m.records, captions))
    path = save_manifest(DatasetManifest(records, m.label_set, Path("/")), out / "manifest.json")
    log.info("wrote %d captions to %s (%d requests)", len(records), path, client.calls)


def _tiny_schedule():
    from .diffusion import make_schedule

    return make_schedule(200, 1e-4, 0.05, "linear")


def cmd_finetune(a, stamp: RunStamp) -> None:
    import torch

    from .backbone import build_tiny_backbone, inflate_bundle, inject_lora
    from .backbone.checkpoint import CheckpointError, load_base_weights, load_checkpoint
    from .backbone.pretrain import PretrainConfig
    from .backbone.tiny import TinyConfig
    from .data import AugmentationConfig
    from .train import LossWeights, TrainConfig, fit

    m = _load_manifest(a.manifest)
    stamp.add_input("manifest", a.manifest)
    out = Path(a.out)
    seed = int(a.seed)
    try:
        cfg = TrainConfig(
            epochs=int(a.epochs),
            batch_size=int(a.batch_size),
            lr=float(a.lr),
            resolution=int(a.resolution),
            seed=seed,
            checkpoint_every=int(a.checkpoint_every),
            num_workers=int(a.num_workers),
            augment=None if a.no_augment else AugmentationConfig.default_training(),
            weights=LossWeights(1.0, float(a.lambda_mask), float(a.lambda_dice)),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if int(a.rank) < 1:
        raise CliError("--rank must be >= 1")
    torch.manual_seed(seed)
    try:
        if a.resume:
            bundle, adapters, sched, _ = load_checkpoint(a.resume)
            stamp.add_input("resume", a.resume)
        else:
            if a.backbone == "pretrained":
                from .backbone.pretrained import load_pretrained_bundle, pretrained_schedule

                bundle = load_pretrained_bundle(a.model_id)
                sched = pretrained_schedule(a.model_id)
            else:
                sched = _tiny_schedule()
                bundle = build_tiny_backbone(TinyConfig(image_size=cfg.resolution, seed=seed), surgery=False)
                if a.base:
                    load_base_weights(bundle, a.base)
                    stamp.add_input("base", a.base)
                else:
                    _pretrain_on_manifest(bundle, m, cfg.resolution, sched, PretrainConfig(
                        ae_steps=int(a.pretrain_ae_steps), denoiser_steps=int(a.pretrain_denoiser_steps), seed=seed))
            inflate_bundle(bundle, 4)
            adapters = inject_lora(bundle, int(a.rank), seed=seed)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    res = fit(m, bundle, adapters, sched, cfg, out_dir=out, resume_from=a.resume)
    log.info("final checkpoint: %s", res.checkpoint)


def _pretrain_on_manifest(bundle, m, resolution, sched, pcfg):
    from .backbone.pretrain import pretrain_tiny_base
    from .data import resize_sample

    rgb, caps = [], []
    for i in range(len(m)):
        s = m.load_sample(i)
        if s.size != (resolution, resolution):
            s = resize_sample(s, (resolution, resolution))
        rgb.append(s.rgb)
        caps.append(s.caption)
    pretrain_tiny_base(bundle, np.stack(rgb), caps, sched, pcfg)


def cmd_generate(a, stamp: RunStamp) -> None:
    from .backbone.checkpoint import CheckpointError, load_checkpoint
    from .generate import GenerationConfig, GenerationConfigError, batch_generate

    klass, count = list(a.klass), list(a.count)
    if len(klass) != len(count):
        raise CliError(f"give one --count per --class ({len(klass)} classes, {len(count)} counts)")
    if any(int(c) < 0 for c in count):
        raise CliError("--count must be >= 0")
    try:
        cfg = GenerationConfig(
            steps=int(a.steps), guidance=float(a.guidance), resolution=int(a.resolution),
            seed=int(a.seed), out=Path(a.out),
        )
    except GenerationConfigError as exc:
        raise CliError(str(exc)) from None
    try:
        bundle, adapters, sched, meta = load_checkpoint(a.checkpoint)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    stamp.add_input("checkpoint", a.checkpoint)
    cfg.train_resolution = (meta.get("extra") or {}).get("train_config", {}).get("resolution")
    try:
        m = batch_generate(dict(zip(klass, (int(c) for c in count))), cfg, bundle, sched, adapters)
    except GenerationConfigError as exc:
        raise CliError(str(exc)) from None
    log.info("generated %d pairs in %s", len(m), a.out)


def _images(m, size: Optional[int]) -> list[np.ndarray]:
    from .data import resize_sample

    out = []
    for i in range(len(m)):
        s = m.load_sample(i)
        if size and s.size != (size, size):
            s = resize_sample(s, (size, size))
        out.append(s.rgb.transpose(2, 0, 1).astype(np.float64))
    return out


def cmd_evaluate_gen(a, stamp: RunStamp) -> None:
    from .metrics.generation import (
        InsufficientSamplesError, RandomConvExtractor, ScaleError, compute_feature_stats, frechet_distance,
        random_conv_perceptual, set_lpips, set_ms_ssim,
    )
    from .metrics.report import MetricReport, write_report

    sets = {}
    for name in ("real_train", "real_test", "synth"):
        path = getattr(a, name)
        stamp.add_input(name, path)
        sets[name] = _images(_load_manifest(path), a.size)
    if a.extractor == "pretrained":
        from .metrics.extractors import InceptionPool, vgg_perceptual

        fid_ext, lp_ext = InceptionPool(), vgg_perceptual()
    else:
        fid_ext, lp_ext = RandomConvExtractor(seed=int(a.seed)), random_conv_perceptual(seed=int(a.seed))
    rows = []
    try:
        ref = compute_feature_stats(sets["real_train"], fid_ext)
        for label, other in (("Real Train vs Real Test", "real_test"), ("Real Train vs Synth Train", "synth")):
            stats = compute_feature_stats(sets[other], fid_ext)
            rows.append({
                "Data for calculations": label,
                "FID": frechet_distance(ref, stats),
                "LPIPS": set_lpips(sets["real_train"], sets[other], lp_ext, int(a.max_pairs), int(a.seed)),
                "MS-SSIM": set_ms_ssim(sets["real_train"], sets[other], int(a.ms_ssim_scales), int(a.max_pairs), int(a.seed)),
            })
    except (InsufficientSamplesError, ScaleError) as exc:
        raise CliError(f"{exc} (see --size / --ms-ssim-scales)") from None
    report = MetricReport(
        "table1", rows,
        datasets={k: {"path": str(getattr(a, k)), "n": len(v)} for k, v in sets.items()},
        config={"extractor": a.extractor, "size": a.size, "ms_ssim_scales": a.ms_ssim_scales, "seed": a.seed},
    )
    write_report(report, a.out)


def cmd_train(a, stamp: RunStamp) -> None:
    import torch

    from .harness import ExperimentConfig, HarnessConfigError, run_classification, run_segmentation
    from .metrics.report import merge_reports, write_report

    task = a.task
    real = _load_manifest(a.real)
    stamp.add_input("real", a.real)
    synth = None
    if a.synth:
        synth = _load_manifest(a.synth)
        stamp.add_input("synth", a.synth)
    archs = a.arch or (["tiny-cnn"] if task == "classification" else ["tiny-unet"])
    conds = a.condition or (["real", "synth", "hybrid"] if synth is not None else ["real"])
    overrides = {k: getattr(a, k) for k in ("epochs", "input_size", "batch_size", "lr") if getattr(a, k) is not None}
    out = Path(a.out)
    reports = []
    for arch in archs:
        for cond in conds:
            try:
                cfg = ExperimentConfig.for_task(task, arch, condition=cond, folds=int(a.folds), seed=int(a.seed),
                                                augment=not a.no_augment, **overrides)
                run = run_classification if task == "classification" else run_segmentation
                res = run(cfg, {"real": real, "synth": synth})
            except (HarnessConfigError, ValueError) as exc:
                raise CliError(str(exc)) from None
            reports.append(res.report)
            mdir = out / "models" / f"{arch}__{cond}"
            mdir.mkdir(parents=True, exist_ok=True)
            for tm in res.models:
                torch.save({"state": tm.model.state_dict(), "mean": tm.mean, "std": tm.std, "label_set": tm.label_set,
                            "task": tm.task, "fold": tm.fold, "config": cfg.to_dict()}, mdir / f"fold{tm.fold}.pt")
    write_report(merge_reports(reports), out)


def cmd_eval_robust(a, stamp: RunStamp) -> None:
    import torch

    from .harness import REGISTRY, ExperimentConfig, LabelMappingError, TrainedModel, run_robustness
    from .metrics.report import merge_reports, write_report

    models_dir = Path(a.models) / "models"
    if not models_dir.is_dir():
        raise CliError(f"no trained models under {models_dir}; run train-cls or train-seg with --out {a.models}")
    external = _load_manifest(a.external)
    stamp.add_input("external", a.external)
    mapping = None
    if a.label_map:
        try:
            mapping = json.loads(Path(a.label_map).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read label map {a.label_map}: {exc}") from None
        stamp.add_input("label_map", a.label_map)
    reports = []
    order = {"real": 0, "synth": 1, "hybrid": 2}
    groups = [p for p in models_dir.iterdir() if p.is_dir()]
    groups.sort(key=lambda p: (p.name.split("__")[0], order.get(p.name.split("__")[-1], 9)))
    for group in groups:
        models, cfg = [], None
        for f in sorted(group.glob("fold*.pt")):
            state = torch.load(f, weights_only=False)
            cfg = ExperimentConfig(**state["config"])
            net = REGISTRY.build(cfg.architecture, cfg.task, len(state["label_set"]) if cfg.task == "classification" else 1, cfg.input_size)
            net.load_state_dict(state["state"])
            net.eval()
            models.append(TrainedModel(net, state["mean"], state["std"], tuple(state["label_set"]), state["task"], state["fold"]))
        if not models:
            continue
        try:
            reports.append(run_robustness(cfg, external, models, mapping))
        except LabelMappingError as exc:
            raise CliError(str(exc)) from None
    if not reports:
        raise CliError(f"no fold models found under {models_dir}")
    kinds = {r.kind for r in reports}
    for kind in sorted(kinds):
        write_report(merge_reports([r for r in reports if r.kind == kind]), a.out)


def cmd_report(a, stamp: RunStamp) -> None:
    from .harness import compare_conditions
    from .metrics.report import ReportError, read_report, render_markdown

    try:
        reports = [read_report(p) for p in a.inputs]
    except (OSError, json.JSONDecodeError, ReportError) as exc:
        raise CliError(str(exc)) from None
    for p in a.inputs:
        stamp.add_input(Path(p).name, p)
    if len(reports) == 1 or len({r.kind for r in reports}) > 1:
        text = "\n\n".join(render_markdown(r) for r in reports)
    else:
        try:
            text = compare_conditions(reports, a.baseline).render()
        except ValueError as exc:
            raise CliError(str(exc)) from None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text + "\n")
    print(text)


COMMANDS = {
    "enrich": cmd_enrich,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate-gen": cmd_evaluate_gen,
    "train-cls": cmd_train,
    "train-seg": cmd_train,
    "eval-robust": cmd_eval_robust,
    "report": cmd_report,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = resolve_args(parser, argv)
    except SystemExit as exc:  # argparse: --help/--version exit 0, usage errors exit 2
        return int(exc.code or 0)
    except CliError as exc:
        print(f"lesionsynth: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    np.random.seed(int(args.seed) % 2**32)
    stamp = RunStamp(args.command, {k: v for k, v in vars(args).items()}, seeds={"seed": int(args.seed)}, argv=argv)
    try:
        COMMANDS[args.command](args, stamp)
    except CliError as exc:
        print(f"lesionsynth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"lesionsynth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    stamp.write(args.out)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
