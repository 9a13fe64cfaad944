"""``trinet`` command line: generate, train, eval, predict, tokens, pca,
features, simulate.

Every command writes its outputs to temporary siblings and renames them
into place only after all of them succeeded, then writes a run manifest
(``<first output>.manifest.json``) recording the command, its resolved
configuration, the seed, input/output paths and SHA-256 hashes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from . import network as nn
from .data import CONDITIONS, CONTINUOUS_FEATURES, EncoderSpec, read_dataset, read_records, stratified_split, write_dataset
from .edsim import MODES, SimConfig, compare, read_flat_config, simulate
from .metrics import benchmark_table, confusion, feature_distribution, rates, roc_auc, select_threshold_max_ppv
from .synth import GeneratorConfig, generate
from .text import UNK, load_embeddings, pca, token_frequency_report
from .training import TrainConfig, predict_batch, predict_records, train

log = logging.getLogger("trinet")

SPLIT_RATIOS = (0.70, 0.15, 0.15)


class CommandError(Exception):
    """A failure reported as a one-line diagnostic."""


# --------------------------------------------------------------------------
# output staging and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Outputs:
    """Stage output files next to their destinations; commit renames them all."""

    def __init__(self):
        self._staged: list[tuple[Path, Path]] = []

    def path(self, final) -> Path:
        final = Path(final)
        if final.parent and not final.parent.exists():
            raise CommandError(f"output directory does not exist: {final.parent}")
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".tmp", dir=final.parent or ".")
        os.close(fd)
        self._staged.append((Path(tmp), final))
        return Path(tmp)

    def write_text(self, final, text: str) -> None:
        self.path(final).write_text(text, encoding="utf-8")

    def commit(self) -> list[Path]:
        for tmp, final in self._staged:
            os.replace(tmp, final)
        done = [final for _, final in self._staged]
        self._staged = []
        return done

    def discard(self) -> None:
        for tmp, _ in self._staged:
            tmp.unlink(missing_ok=True)
        self._staged = []


def write_manifest(command: str, arguments: dict, config: dict, seed, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "arguments": arguments,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    target = Path(f"{outputs[0]}.manifest.json")
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, target)
    return target


# --------------------------------------------------------------------------
# config overrides


def _cast(raw: str, current, name: str):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise CommandError(f"{name}: expected a boolean, got {raw!r}")
    if current is None or raw.lower() == "none":
        if raw.lower() == "none":
            return None
        try:
            return float(raw) if any(c in raw for c in ".e") else int(raw)
        except ValueError:
            return raw
    try:
        if isinstance(current, tuple):
            return tuple(type(current[0])(v) for v in raw.split(","))
        return type(current)(raw)
    except ValueError as exc:
        raise CommandError(f"{name}: cannot parse {raw!r}") from exc


def apply_overrides(obj, pairs: dict[str, str], what: str):
    names = {f.name for f in dataclasses.fields(obj)}
    kw = {}
    for key, raw in pairs.items():
        if key not in names:
            raise CommandError(f"unknown {what} setting {key!r}")
        kw[key] = _cast(raw, getattr(obj, key), key)
    try:
        return dataclasses.replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise CommandError(str(exc)) from exc


def _pairs(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CommandError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _settings(args) -> dict[str, str]:
    pairs = read_flat_config(args.config) if getattr(args, "config", None) else {}
    pairs.update(_pairs(getattr(args, "set", None)))
    return pairs


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, out: Outputs):
    cfg = GeneratorConfig(condition=args.condition, seed=args.seed)
    cfg = apply_overrides(cfg, _settings(args), "generator")
    flags = {"n": args.n, "prevalence": args.prevalence}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if args.null_signal:
        cfg = cfg.null_signal()
    ds = generate(cfg)
    write_dataset(out.path(args.out), ds)
    return dataclasses.asdict(cfg), [], [args.out]


def _split(ds, seed):
    try:
        return stratified_split(ds, SPLIT_RATIOS, seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


def cmd_train(args, out: Outputs):
    ds = read_dataset(args.dataset, args.condition)
    settings = _settings(args)
    model_pairs = {k[6:]: v for k, v in settings.items() if k.startswith("model.")}
    train_pairs = {k: v for k, v in settings.items() if not k.startswith("model.")}
    tconfig = TrainConfig.desk(seed=args.seed) if args.desk else TrainConfig(seed=args.seed)
    tconfig = apply_overrides(tconfig, train_pairs, "training")
    flags = {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size}
    tconfig = dataclasses.replace(tconfig, **{k: v for k, v in flags.items() if v is not None})
    if args.no_smote:
        tconfig = dataclasses.replace(tconfig, use_smote=False)
    mconfig = apply_overrides(nn.ModelConfig(), model_pairs, "model")
    embeddings = load_embeddings(args.embeddings) if args.embeddings else None

    train_ds, val_ds, _ = _split(ds, args.seed)

    def progress(epoch, curve):
        log.info(
            "epoch %d train_loss %.4f val_loss %.4f val_acc %.4f",
            epoch, curve.train_loss[-1], curve.val_loss[-1], curve.val_acc[-1],
        )

    params, curve, spec, mconfig = train(train_ds, val_ds, mconfig, tconfig, embeddings, progress)
    metadata = {
        "condition": args.condition,
        "seed": args.seed,
        "split_ratios": list(SPLIT_RATIOS),
        "dataset_sha256": sha256_file(args.dataset),
        "train_config": tconfig.to_dict(),
        "encoder": spec.to_dict(),
    }
    nn.save_checkpoint(out.path(args.checkpoint), params, mconfig, spec.token_vocab, metadata)
    out.write_text(
        args.curve,
        _csv_text(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"],
                  [(e, *map(repr, vals)) for e, *vals in curve.rows()]),
    )
    config = {"train": tconfig.to_dict(), "model": mconfig.to_dict(), "condition": args.condition}
    inputs = [args.dataset] + ([args.embeddings] if args.embeddings else [])
    return config, inputs, [args.checkpoint, args.curve]


def _load_model(path):
    params, mconfig, vhash, meta = nn.load_checkpoint(path)
    if "encoder" not in meta:
        raise CommandError(f"{path}: checkpoint has no encoder state")
    spec = EncoderSpec.from_dict(meta["encoder"])
    if nn.vocab_hash(spec.token_vocab) != vhash:
        raise CommandError(f"{path}: vocabulary hash does not match the stored encoder")
    return params, mconfig, spec, meta


def cmd_eval(args, out: Outputs):
    params, mconfig, spec, meta = _load_model(args.checkpoint)
    condition = args.condition or meta["condition"]
    ds = read_dataset(args.dataset, condition)
    if meta.get("dataset_sha256") not in (None, sha256_file(args.dataset)):
        log.warning("dataset differs from the one used for training; splits will not match")
    _, val_ds, test_ds = _split(ds, meta["seed"])
    for name, part in (("validation", val_ds), ("test", test_ds)):
        n_pos, n_neg = part.class_counts()
        if n_pos == 0 or n_neg == 0:
            raise CommandError(f"{name} split has a single class ({n_pos} positive, {n_neg} negative)")

    val_p = predict_batch(val_ds, params, spec, mconfig)
    test_p = predict_batch(test_ds, params, spec, mconfig)
    choice = select_threshold_max_ppv(
        val_p, val_ds.labels, min_predicted_positives=args.min_predicted_positives, min_tpr=args.min_tpr
    )
    cm = confusion(test_p, test_ds.labels, choice.threshold)
    r = rates(cm)
    roc = roc_auc(test_p, test_ds.labels)
    val_auc = roc_auc(val_p, val_ds.labels).auc

    report = {
        "condition": condition,
        "threshold": choice.threshold,
        "validation": {"ppv": choice.ppv, "tpr": choice.tpr,
                       "predicted_positives": choice.predicted_positives, "auc": val_auc},
        "test": {"confusion": dataclasses.asdict(cm), "rates": dataclasses.asdict(r), "auc": roc.auc},
        "benchmarks": [
            {"method": method, **dataclasses.asdict(b)}
            for (cond, method), b in benchmark_table().items() if cond == condition
        ],
    }
    out.write_text(args.report, json.dumps(report, indent=1) + "\n")
    out.write_text(args.roc, _csv_text(
        ["threshold", "fpr", "tpr"],
        [(repr(t), repr(f), repr(p)) for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)],
    ))
    config = {"condition": condition, "split_seed": meta["seed"],
              "min_tpr": args.min_tpr, "min_predicted_positives": args.min_predicted_positives}
    return config, [args.checkpoint, args.dataset], [args.report, args.roc]


def cmd_predict(args, out: Outputs):
    params, mconfig, spec, _ = _load_model(args.checkpoint)
    records = read_records(args.dataset)
    probs = predict_records(records, params, spec, mconfig)
    header = ["row", "probability"] + (["predicted"] if args.threshold is not None else [])
    rows = []
    for i, p in enumerate(probs):
        row = [i, repr(p)]
        if args.threshold is not None:
            row.append(int(p >= args.threshold))
        rows.append(row)
    out.write_text(args.out, _csv_text(header, rows))
    return {"threshold": args.threshold}, [args.checkpoint, args.dataset], [args.out]


def cmd_tokens(args, out: Outputs):
    ds = read_dataset(args.dataset, args.condition)
    rows = token_frequency_report(ds, args.min_rel_diff, args.min_support)
    out.write_text(args.out, _csv_text(
        ["token", "pos_freq", "neg_freq", "rel_diff"],
        [(r.token, repr(r.pos_freq), repr(r.neg_freq), repr(r.rel_diff)) for r in rows],
    ))
    config = {"condition": args.condition, "min_rel_diff": args.min_rel_diff, "min_support": args.min_support}
    return config, [args.dataset], [args.out]


def cmd_pca(args, out: Outputs):
    if (args.checkpoint is None) == (args.embeddings is None):
        raise CommandError("give exactly one of --checkpoint or --embeddings")
    if args.checkpoint:
        params, _, spec, _ = _load_model(args.checkpoint)
        vocab, vectors = spec.token_vocab, params["embedding"]
    else:
        table = load_embeddings(args.embeddings)
        vocab, vectors = table.vocab, table.vectors
    index = {tok: i for i, tok in enumerate(vocab)}

    leaning = {}
    inputs = [args.checkpoint or args.embeddings]
    if args.dataset:
        if not args.condition:
            raise CommandError("--dataset needs --condition")
        ds = read_dataset(args.dataset, args.condition)
        for r in token_frequency_report(ds, args.min_rel_diff, args.min_support):
            if r.token in index:
                leaning[r.token] = "positive" if r.pos_freq > r.neg_freq else "negative"
        tokens = sorted(leaning)
        inputs.append(args.dataset)
    else:
        tokens = [t for t in vocab if t != UNK]
    if len(tokens) < 2:
        raise CommandError(f"need at least 2 tokens for PCA, found {len(tokens)}")

    coords, _, var = pca(vectors[[index[t] for t in tokens]], args.components)
    header = ["token"] + [f"pc{i + 1}" for i in range(args.components)] + (["leaning"] if leaning else [])
    rows = []
    for tok, c in zip(tokens, coords):
        rows.append([tok, *map(repr, c.tolist())] + ([leaning[tok]] if leaning else []))
    out.write_text(args.out, _csv_text(header, rows))
    return {"components": args.components, "explained_variance": var.tolist()}, inputs, [args.out]


def cmd_features(args, out: Outputs):
    ds = read_dataset(args.dataset, args.condition)
    features = args.feature or list(CONTINUOUS_FEATURES)
    blocks = []
    for feat in features:
        dists = feature_distribution(ds, feat, args.bins)
        for cls in (1, 0):
            d = dists[cls]
            lines = [f"[{feat} class={cls}]"]
            lines += [f"{k}={_fmt(getattr(d, k))}" for k in ("min", "q1", "median", "q3", "max")]
            lines.insert(1, f"n={d.n}")
            lines.append("bin_lo,bin_hi,count")
            lines += [f"{d.bin_edges[i]!r},{d.bin_edges[i + 1]!r},{c}" for i, c in enumerate(d.counts)]
            blocks.append("\n".join(lines))
    out.write_text(args.out, "\n\n".join(blocks) + "\n")
    return {"condition": args.condition, "features": features, "bins": args.bins}, [args.dataset], [args.out]


def _episode_rows(mode, episodes):
    for e in episodes:
        yield [
            mode, e.patient, repr(e.arrival), repr(e.triage_done), repr(e.pia_start), repr(e.pia_done),
            _fmt(e.test_ordered), _fmt(e.test_done), repr(e.departure), repr(e.length_of_stay),
            int(e.truly_positive), int(e.screened_positive), int(e.directive),
        ]


EPISODE_HEADER = [
    "mode", "patient", "arrival", "triage_done", "pia_start", "pia_done", "test_ordered",
    "test_done", "departure", "length_of_stay", "truly_positive", "screened_positive", "directive",
]


def cmd_simulate(args, out: Outputs):
    base = SimConfig.for_condition(args.condition, seed=args.seed)
    try:
        config = SimConfig.from_flat(_settings(args), base)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    if config.seed != args.seed:
        config = dataclasses.replace(config, seed=args.seed)

    if args.compare:
        cmp, base_eps, tri_eps = compare(config)
        result = {
            "baseline": dataclasses.asdict(cmp.baseline),
            "trinet": dataclasses.asdict(cmp.trinet),
            "mean_los_delta": cmp.mean_los_delta,
            "p90_los_delta": cmp.p90_los_delta,
            "extra_tests": cmp.extra_tests,
            "extra_unnecessary_tests": cmp.extra_unnecessary_tests,
        }
        rows = list(_episode_rows("baseline", base_eps)) + list(_episode_rows("trinet", tri_eps))
    else:
        res, eps = simulate(config, args.mode)
        result = dataclasses.asdict(res)
        rows = list(_episode_rows(args.mode, eps))
    out.write_text(args.out, json.dumps(result, indent=1) + "\n")
    outputs = [args.out]
    if args.episodes:
        out.write_text(args.episodes, _csv_text(EPISODE_HEADER, rows))
        outputs.append(args.episodes)
    if args.compare and args.paired:
        out.write_text(args.paired, _csv_text(
            ["patient", "baseline_los", "trinet_los", "delta", "tested"],
            [(b.patient, repr(b.length_of_stay), repr(t.length_of_stay), repr(d), int(b.tested or t.tested))
             for b, t, d in zip(base_eps, tri_eps, cmp.los_deltas)],
        ))
        outputs.append(args.paired)
    inputs = [args.config] if args.config else []
    return {"mode": "compare" if args.compare else args.mode, **config.to_flat()}, inputs, outputs


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trinet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        return p

    def settings(p, what):
        p.add_argument("--config", help=f"flat key=value file of {what} settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help=f"override one {what} setting")

    p = add("generate", cmd_generate, "draw a synthetic labeled triage dataset")
    p.add_argument("--condition", choices=CONDITIONS, default="pneumonia")
    p.add_argument("--n", type=int, help="number of records (default 20000)")
    p.add_argument("--prevalence", type=float, help="positive fraction (default 0.06)")
    p.add_argument("--null-signal", action="store_true", help="switch off every planted effect")
    p.add_argument("--out", required=True, help="dataset file (ndjson)")
    settings(p, "generator")

    p = add("train", cmd_train, "split, encode, oversample and train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--condition", choices=CONDITIONS, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-smote", action="store_true", help="skip SMOTE augmentation")
    p.add_argument("--desk", action="store_true", help="use the short desk-budget training preset")
    p.add_argument("--embeddings", help="pretrained word vectors (text, 'V d' header)")
    p.add_argument("--checkpoint", required=True, help="output checkpoint file")
    p.add_argument("--curve", required=True, help="output per-epoch learning curve (CSV)")
    settings(p, "training (prefix model. for network)")

    p = add("eval", cmd_eval, "choose the threshold on validation, report on test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="the dataset the checkpoint was trained on")
    p.add_argument("--condition", choices=CONDITIONS, help="defaults to the checkpoint's condition")
    p.add_argument("--min-tpr", type=float, default=0.05)
    p.add_argument("--min-predicted-positives", type=int, default=10)
    p.add_argument("--report", required=True, help="output report (JSON)")
    p.add_argument("--roc", required=True, help="output ROC points (CSV)")

    p = add("predict", cmd_predict, "score records with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="records to score (labels optional)")
    p.add_argument("--threshold", type=float, help="also emit 0/1 predictions at this threshold")
    p.add_argument("--out", required=True, help="output probabilities (CSV)")

    p = add("tokens", cmd_tokens, "tokens whose class frequencies differ strongly")
    p.add_argument("--dataset", required=True)
    p.add_argument("--condition", choices=CONDITIONS, required=True)
    p.add_argument("--min-rel-diff", type=float, default=0.5)
    p.add_argument("--min-support", type=int, default=5)
    p.add_argument("--out", required=True, help="output token report (CSV)")

    p = add("pca", cmd_pca, "project token embeddings onto principal components")
    p.add_argument("--checkpoint", help="take embeddings from a trained model")
    p.add_argument("--embeddings", help="take embeddings from a word-vector file")
    p.add_argument("--dataset", help="restrict to tokens in the token report of this dataset")
    p.add_argument("--condition", choices=CONDITIONS)
    p.add_argument("--min-rel-diff", type=float, default=0.5)
    p.add_argument("--min-support", type=int, default=5)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--out", required=True, help="output coordinates (CSV)")

    p = add("features", cmd_features, "per-class distributions of continuous features")
    p.add_argument("--dataset", required=True)
    p.add_argument("--condition", choices=CONDITIONS, required=True)
    p.add_argument("--feature", action="append", choices=CONTINUOUS_FEATURES,
                   help="feature to summarize (repeatable; default all)")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True, help="output summary (text blocks)")

    p = add("simulate", cmd_simulate, "discrete-event ED simulation")
    p.add_argument("--condition", choices=CONDITIONS, default="pneumonia")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--mode", choices=MODES)
    mode.add_argument("--compare", action="store_true", help="run both modes on the same patients")
    p.add_argument("--out", required=True, help="output result (JSON)")
    p.add_argument("--episodes", help="output episode log (CSV)")
    p.add_argument("--paired", help="output per-patient LOS differences (CSV, with --compare)")
    settings(p, "simulation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    if getattr(args, "paired", None) and not args.compare:
        parser.error("--paired requires --compare")

    started = time.monotonic()
    out = Outputs()
    try:
        config, inputs, outputs = args.func(args, out)
        out.commit()
        arguments = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        write_manifest(args.command, arguments, config, args.seed, inputs, outputs, started)
    except (CommandError, ValueError, OSError, FloatingPointError, KeyError) as exc:
        out.discard()
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"trinet {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
