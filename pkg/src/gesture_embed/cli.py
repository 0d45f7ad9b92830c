"""Command-line driver: ``gesture-embed {synth,pretrain,embed,eval,report}``.

Each command reads an optional JSON config, applies flag overrides, writes
everything under ``--out`` and finishes with ``outputs.json`` listing the
produced files and their hashes. Exit status: 0 ok, 2 configuration or input
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .encoder import EncoderConfig
from .evaluation import (
    DEFAULT_SIGMAS,
    ResolverConfig,
    concat_tables,
    dialogue_history_experiment,
    fingerprint,
    form_similarity_correlation,
    leave_one_round_out,
    noise_robustness,
)
from .pretrain import (
    ARCHITECTURES,
    ArchitectureKind,
    ConfigurationError,
    NonFiniteLossError,
    TrainConfig,
    best_checkpoint,
    build_architecture,
    embed_samples,
    load_checkpoint,
    pretrain,
)
from .skeleton import NUM_JOINTS, IntegrityError, ManifestValidationError, load_manifest
from .synth import MANIFEST_NAME, SynthConfig, SynthConfigError, generate_corpus
from .verbal import EmptyUtteranceError, FeatureStore, pool_utterance

log = logging.getLogger("gesture_embed")

CACHE_ENV = "GESTURE_EMBED_CACHE"
OUTPUTS_NAME = "outputs.json"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, message: str, status: int = EXIT_CONFIG):
        super().__init__(message)
        self.status = status


# ---------------------------------------------------------------------------
# config and paths


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CliError(f"config {p}: top level must be an object")
    return doc


def _section(doc: dict, name: str, cls) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config field {name!r} must be an object")
    known = set(cls.__dataclass_fields__)
    for key in section:
        if key not in known:
            raise CliError(f"config field {name}.{key} is not recognised")
    return dict(section)


def _seed(args, doc: dict) -> int:
    return int(args.seed if args.seed is not None else doc.get("seed", 0))


def _manifest_path(args, doc: dict) -> Path:
    raw = args.data or doc.get("data")
    if raw is None:
        raise CliError("no dataset given (use --data or the config 'data' field)")
    p = Path(raw)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise CliError(f"dataset manifest {p} not found")
    return p


def _resolve_store(raw: str | Path | None) -> Path | None:
    """Feature-store path; relative paths that do not exist fall back to the cache root."""
    if raw is None:
        return None
    p = Path(raw)
    if not p.exists() and not p.is_absolute() and os.environ.get(CACHE_ENV):
        p = Path(os.environ[CACHE_ENV]) / p
    if not (p / "index.json").is_file():
        raise CliError(f"feature store {p} not found")
    return p


def _checkpoint_path(raw: str | None) -> Path:
    if raw is None:
        raise CliError("--checkpoint is required")
    p = Path(raw)
    if p.is_dir():
        try:
            p = best_checkpoint(p)
        except FileNotFoundError:
            raise CliError(f"no best.json in run directory {p}") from None
    if not p.is_file():
        raise CliError(f"checkpoint {p} not found")
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs_manifest(out: Path, command: str, seed: int, config: dict) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != OUTPUTS_NAME)
    doc = {
        "command": command,
        "seed": seed,
        "config_fingerprint": fingerprint({**config, "seed": seed}),
        "files": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    }
    path = out / OUTPUTS_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# embedding store


def write_embedding_store(out: Path, embeddings: dict[str, np.ndarray], meta: dict) -> None:
    ids = list(embeddings)
    matrix = np.stack([embeddings[i] for i in ids]).astype("<f4") if ids else np.zeros((0, 0), "<f4")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "embeddings.npy", matrix)
    _write_json(out / "index.json", {**meta, "ids": ids, "width": int(matrix.shape[1]) if ids else 0})


def read_embedding_store(path: str | Path) -> dict[str, np.ndarray]:
    root = Path(path)
    if not (root / "index.json").is_file() or not (root / "embeddings.npy").is_file():
        raise CliError(f"embedding store {root} not found")
    index = json.loads((root / "index.json").read_text())
    matrix = np.load(root / "embeddings.npy")
    if len(index["ids"]) != len(matrix):
        raise CliError(f"embedding store {root}: index and matrix disagree")
    return {sid: matrix[i].astype(np.float64) for i, sid in enumerate(index["ids"])}


def semantic_table(manifest, store: FeatureStore, null_vector: np.ndarray | None) -> dict[str, np.ndarray]:
    """Pooled semantic vector per labeled sample; empty utterances map to ``null_vector``."""
    out = {}
    for s in manifest.labeled():
        vec = None
        if s.verbal_ref is not None:
            try:
                vec = pool_utterance(store.get(s.verbal_ref))
            except EmptyUtteranceError:
                vec = None
        out[s.sample_id] = vec if vec is not None else null_vector
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, doc: dict) -> dict:
    section = _section(doc, "synth", SynthConfig) if "synth" in doc else {k: v for k, v in doc.items() if k != "seed"}
    section["seed"] = _seed(args, doc)
    try:
        config = SynthConfig.from_dict(section)
    except SynthConfigError as exc:
        raise CliError(f"invalid synth config field {exc.field!r}: {exc}") from None
    generate_corpus(config, args.out)
    return {"synth": config.to_dict()}


def cmd_pretrain(args, doc: dict) -> dict:
    manifest = load_manifest(_manifest_path(args, doc))
    arch = args.arch or doc.get("arch", "unimodal")
    modality = args.modality or doc.get("modality", "none" if arch == "unimodal" else "semantic")
    try:
        kind = ArchitectureKind(arch, modality)
    except (ValueError, ConfigurationError) as exc:
        raise CliError(str(exc)) from None
    enc = EncoderConfig(**_section(doc, "encoder", EncoderConfig))
    train_doc = _section(doc, "train", TrainConfig)
    train_doc["seed"] = _seed(args, doc)
    if args.max_epochs is not None:
        train_doc["max_epochs"] = args.max_epochs
    train = TrainConfig.from_dict(train_doc)
    store = None
    if kind.arch != "unimodal":
        store = _resolve_store(args.feature_store or doc.get("feature_store") or manifest.feature_store)
    speech_layers = int(doc.get("speech_layers", 25))
    pipeline = build_architecture(kind, enc, train, speech_layers)
    log.info("pretraining %s (%s); loss terms %s", kind.arch, kind.modality, ",".join(pipeline.loss_terms))
    result = pretrain(manifest, pipeline, args.out, feature_store=store)
    log.info("best epoch %d (rho=%.4f, epoch-0 rho=%s)", result.best_epoch, result.best_rho, result.epoch0_rho)
    return {"arch": kind.arch, "modality": kind.modality, "encoder": enc.to_dict(), "train": train.to_dict()}


def _load_pipeline(args):
    ckpt = _checkpoint_path(args.checkpoint)
    try:
        pipeline, record = load_checkpoint(ckpt)
    except (ConfigurationError, KeyError, RuntimeError) as exc:
        raise CliError(f"checkpoint {ckpt} does not load: {exc}") from None
    return pipeline, ckpt


def _check_joints(manifest) -> None:
    for s in manifest.labeled()[:1] + manifest.samples[:1]:
        if s.skeleton.joint_count != NUM_JOINTS:
            raise CliError(f"sample {s.sample_id} has {s.skeleton.joint_count} joints, encoder expects {NUM_JOINTS}")


def cmd_embed(args, doc: dict) -> dict:
    manifest = load_manifest(_manifest_path(args, doc))
    pipeline, ckpt = _load_pipeline(args)
    _check_joints(manifest)
    emb = embed_samples(pipeline, manifest.samples)
    write_embedding_store(Path(args.out), emb, {"checkpoint_sha256": _sha256(ckpt), "arch": pipeline.kind.arch,
                                                 "seed": _seed(args, doc)})
    return {"checkpoint_sha256": _sha256(ckpt)}


def _resolver_config(doc: dict) -> ResolverConfig:
    section = _section(doc, "resolver", ResolverConfig)
    if "hidden" in section:
        section["hidden"] = tuple(section["hidden"])
    return ResolverConfig(**section)


def _report_files(out: Path, name: str, report: dict, rows: list[dict]) -> None:
    _write_json(out / f"{name}.json", report)
    if rows:
        with (out / f"{name}.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def _embeddings_arg(args) -> dict[str, np.ndarray]:
    if args.embeddings is None:
        raise CliError("--embeddings is required")
    return read_embedding_store(args.embeddings)


def cmd_eval(args, doc: dict) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args, doc))
    seed = _seed(args, doc)
    resolver = _resolver_config(doc)
    labeled = manifest.labeled()
    k = len(manifest.vocabulary)
    config = {"eval": args.eval_command, "resolver": resolver.to_dict()}

    if args.eval_command == "similarity":
        emb = _embeddings_arg(args)
        rho, p = form_similarity_correlation(manifest.form_pairs, emb)
        report = {"rho": rho, "p": p, "pairs": len(manifest.form_pairs), "seed": seed,
                  "config_fingerprint": fingerprint({**config, "seed": seed})}
        _report_files(out, "similarity", report, [{"rho": rho, "p": p, "pairs": len(manifest.form_pairs)}])
        plots.correlation_bars({"embedding": rho}, out / "similarity.svg")

    elif args.eval_command in ("resolve", "concat"):
        store_path = _resolve_store(args.feature_store or doc.get("feature_store") or manifest.feature_store) \
            if (args.eval_command == "concat" or args.source == "semantic") else None
        null = None
        if args.checkpoint is not None:
            pipeline, _ = _load_pipeline(args)
            if pipeline.null_vector is not None:
                null = pipeline.null_vector.detach().double().numpy()
        if store_path is not None and null is None:
            null = np.zeros(FeatureStore(store_path).get(next(s.verbal_ref for s in labeled if s.verbal_ref)).width)
        if args.eval_command == "concat":
            table = concat_tables(_embeddings_arg(args), semantic_table(manifest, FeatureStore(store_path), null), null)
        elif args.source == "semantic":
            table = semantic_table(manifest, FeatureStore(store_path), null)
        else:
            table = _embeddings_arg(args)
        rep = leave_one_round_out(labeled, table, resolver, seed, num_classes=k, name=args.eval_command)
        rows = [{"round": f.round, "accuracy": f.accuracy, "n_train": f.n_train, "n_test": f.n_test,
                 "majority_rate": f.majority_rate} for f in rep.folds]
        _report_files(out, args.eval_command, rep.to_dict(), rows)
        plots.accuracy_by_round({args.eval_command: {f.round: f.accuracy for f in rep.folds}},
                                out / f"{args.eval_command}.svg", rep.chance)

    elif args.eval_command == "history":
        rep = dialogue_history_experiment(labeled, _embeddings_arg(args), resolver, seed, num_classes=k)
        for rec in rep.parity:
            log.info("parity dialogue=%s round=%d baseline=%d specific=%d %s", rec["dialogue"], rec["round"],
                     rec["baseline_n"], rec["dialogue_specific_n"], "pass" if rec["pass"] else "FAIL")
        rows = [{"round": r, "baseline": rep.baseline[r], "dialogue_specific": rep.dialogue_specific[r]}
                for r in sorted(rep.baseline)]
        _report_files(out, "history", rep.to_dict(), rows)
        plots.accuracy_by_round({"baseline": rep.baseline, "dialogue-specific": rep.dialogue_specific},
                                out / "history.svg", 1.0 / k)

    elif args.eval_command == "noise":
        pipeline, _ = _load_pipeline(args)
        _check_joints(manifest)
        sigmas = _parse_sigmas(args.sigmas) if args.sigmas else tuple(doc.get("sigmas", DEFAULT_SIGMAS))

        def embed_fn(samples, transform):
            return embed_samples(pipeline, samples, transform)

        table = noise_robustness(labeled, embed_fn, sigmas, resolver, seed, num_classes=k)
        rows = [{"sigma": r.sigma, "mean": r.mean, "sd": r.sd} for r in table]
        report = {"rows": rows, "folds": {f"{r.sigma:g}": r.report.to_dict() for r in table}, "seed": seed,
                  "config_fingerprint": fingerprint({**config, "sigmas": list(sigmas), "seed": seed})}
        _report_files(out, "noise", report, rows)
        plots.accuracy_by_sigma([(r.sigma, r.mean, r.sd) for r in table], out / "noise.svg")
        config["sigmas"] = list(sigmas)
    return config


def _parse_sigmas(text: str) -> tuple[float, ...]:
    try:
        sigmas = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise CliError(f"--sigmas: cannot parse {text!r}") from None
    if not sigmas or any(s < 0 for s in sigmas):
        raise CliError("--sigmas must be a non-empty list of non-negative numbers")
    return sigmas


def cmd_report(args, doc: dict) -> dict:
    """Collect ``*.json`` eval reports under ``--inputs`` into one CSV with figures."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves, rhos = [], {}, {}
    for root in args.inputs:
        for path in sorted(Path(root).rglob("*.json")):
            if path.name in (OUTPUTS_NAME, "index.json", "best.json"):
                continue
            doc_ = json.loads(path.read_text())
            name = f"{path.parent.name}/{path.stem}"
            if "folds" in doc_ and "mean" in doc_:
                rows.append({"report": name, "metric": "accuracy", "value": doc_["mean"], "sd": doc_["sd"]})
                curves[name] = {f["round"]: f["accuracy"] for f in doc_["folds"]}
            elif "rho" in doc_:
                rows.append({"report": name, "metric": "rho", "value": doc_["rho"], "sd": ""})
                rhos[name] = doc_["rho"]
            elif "rows" in doc_:
                for r in doc_["rows"]:
                    rows.append({"report": name, "metric": f"accuracy@sigma={r['sigma']:g}", "value": r["mean"],
                                 "sd": r["sd"]})
            elif "baseline_by_round" in doc_:
                for key in ("baseline_by_round", "dialogue_specific_by_round"):
                    curves[f"{name}:{key.split('_by')[0]}"] = {int(r): v for r, v in doc_[key].items()}
    if not rows:
        raise CliError("no reports found under the given inputs")
    _report_files(out, "summary", {"rows": rows, "seed": _seed(args, doc)}, rows)
    if curves:
        plots.accuracy_by_round(curves, out / "accuracy_by_round.svg")
    if rhos:
        plots.correlation_bars(rhos, out / "correlations.svg")
    return {"inputs": [str(p) for p in args.inputs]}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gesture-embed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory or manifest.json")
        return p

    common(sub.add_parser("synth", help="generate a synthetic corpus"), data=False)

    p = common(sub.add_parser("pretrain", help="pre-train an encoder"))
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--modality", choices=("none", "semantic", "speech"))
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--feature-store")

    p = common(sub.add_parser("embed", help="write gesture-only embeddings for a dataset"))
    p.add_argument("--checkpoint", help="checkpoint file or pretrain run directory")

    p = common(sub.add_parser("eval", help="run an evaluation protocol"))
    p.add_argument("eval_command", choices=("similarity", "resolve", "history", "noise", "concat"))
    p.add_argument("--embeddings", help="embedding store directory")
    p.add_argument("--checkpoint")
    p.add_argument("--feature-store")
    p.add_argument("--source", choices=("gesture", "semantic"), default="gesture",
                   help="resolve: which representation to classify")
    p.add_argument("--sigmas", help="comma-separated jitter grid in pixels")

    p = common(sub.add_parser("report", help="summarize eval outputs"), data=False)
    p.add_argument("--inputs", nargs="+", required=True)
    return parser


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "embed": cmd_embed, "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config = COMMANDS[args.command](args, doc)
        write_outputs_manifest(out, args.command, _seed(args, doc), config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ManifestValidationError as exc:
        print(f"error: invalid manifest field {exc.field!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, IntegrityError, KeyError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
