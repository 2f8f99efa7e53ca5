"""Command-line entry point: ``spokenalign <subcommand> [--config FILE] [flags]``.

Every subcommand reads its own section of an optional TOML or JSON config
file; flags override file values, and the resolved section is written to
``config.json`` in the output directory. Exit codes: 0 success, 1 data or
config error, 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import align, dataset_io, frontend, retrieval, synth, wordcnn
from .errors import ConfigError, DataError, SpokenAlignError
from .records import CaptionRecord

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# -- config sections -------------------------------------------------------------

def _fields(cls, skip=()):
    return {f.name: (f.default, str(f.type)) for f in dataclasses.fields(cls) if f.name not in skip}


SECTIONS = {
    "synth": {**_fields(synth.SynthConfig, skip=("n_images",)),
              "n_train": (200, "int"), "n_test": (100, "int"), "audio": (False, "bool"),
              "audio_seed": (0, "int")},
    "featurize": _fields(frontend.FrontendConfig),
    "pretrain": {**_fields(wordcnn.PretrainConfig),
                 "channels": (64, "int"), "hidden": (1024, "int"), "dropout": (0.5, "float"),
                 "val_fraction": (0.0, "float")},
    "embed": {"batch_size": (64, "int")},
    "train": _fields(align.FitConfig),
    "eval": {"k": (10, "int"), "normalize_words": (True, "bool"), "csv": (False, "bool")},
    "align": {"normalize_words": (True, "bool"), "svg": (False, "bool")},
}


def _coerce(key, value, default, annotation):
    """Check or convert ``value`` to the type implied by the field annotation."""
    optional = "None" in annotation
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        if optional:
            return None
        raise ConfigError(f"{key}: value required")
    base = type(default) if default is not None else None
    for name in ("bool", "int", "float", "str", "tuple"):
        if name in annotation:
            base = {"bool": bool, "int": int, "float": float, "str": str, "tuple": tuple}[name]
            break
    try:
        if base is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(value)
        if base is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base is tuple:
            if isinstance(value, str):
                value = json.loads(value)
            return tuple(value)
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot use {value!r} as {base.__name__ if base else annotation}") from None


def load_config_file(path):
    if path is None:
        return {}
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = tomllib.loads(raw.decode()) if path.suffix == ".toml" else json.loads(raw)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table of sections")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown config section")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be a table")
    return doc


def resolve(section, file_doc, flags):
    """Defaults, then the file's section, then explicit flags."""
    spec = SECTIONS[section]
    out = {k: d for k, (d, _) in spec.items()}
    for key, value in file_doc.get(section, {}).items():
        if key not in spec:
            raise ConfigError(f"{section}.{key}: unknown key")
        out[key] = _coerce(f"{section}.{key}", value, *spec[key])
    for key, value in flags.items():
        if value is not None:
            out[key] = _coerce(f"{section}.{key}", value, *spec[key])
    return out


def _build(cls, cfg, section):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        obj = cls(**{k: v for k, v in cfg.items() if k in names})
        return obj.validate() if hasattr(obj, "validate") else obj
    except SpokenAlignError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def record_config(out_dir, command, cfg, inputs):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": {k: _jsonable(v) for k, v in cfg.items()},
           "inputs": {k: dataset_io.relpath(v, out_dir) for k, v in inputs.items() if v is not None}}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------

def synth_splits(cfg):
    """Generate the resolved [synth] section and split it into train and test."""
    if cfg["n_train"] < 1 or cfg["n_test"] < 0:
        raise ConfigError("synth.n_train must be >= 1 and synth.n_test >= 0")
    data = synth.generate(_build(synth.SynthConfig, {**cfg, "n_images": cfg["n_train"] + cfg["n_test"]}, "synth"))
    return (data,) + synth.split(data, cfg["n_train"])


def cmd_synth(args, cfg):
    out = Path(args.out)
    data, train, test = synth_splits(cfg)
    if cfg["audio"]:
        synth.write_spoken(out, data, synth.AudioConfig(seed=cfg["audio_seed"]),
                           splits={"train": train, "test": test})
    else:
        synth.write(out / "train", train)
        synth.write(out / "test", test)
    record_config(out, "synth", cfg, {})
    print(f"wrote {len(train.images)} train and {len(test.images)} test images to {out}")


def read_segments(path):
    """Rows of (wav, start_ms, end_ms, word, segment_id) from a CSV with a header."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read segment list {path}: {exc.strerror}") from exc
    segments = []
    for n, row in enumerate(rows, start=2):
        try:
            wav = row["wav"]
            start, end = float(row["start_ms"]), float(row["end_ms"])
            word = row["word"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path} line {n}: need wav,start_ms,end_ms,word columns ({exc})") from None
        seg_id = row.get("segment_id") or f"{Path(wav).stem}_{n - 2:05d}"
        segments.append((wav, start, end, word, seg_id))
    return segments


def cmd_featurize(args, cfg):
    fcfg = _build(frontend.FrontendConfig, cfg, "featurize")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wav_dir = Path(args.wav_dir)
    index, failures, cache = [], 0, {}
    for wav, start, end, word, seg_id in read_segments(args.segments):
        try:
            if wav not in cache:
                cache.clear()
                cache[wav] = frontend.read_wav(wav_dir / wav)
            spec = frontend.word_spectrogram(cache[wav].segment(start, end), fcfg)
        except (SpokenAlignError, OSError) as exc:
            failures += 1
            print(f"error: {wav} [{start}, {end}] ms: {exc}", file=sys.stderr)
            continue
        dataset_io.write_tensor(out / f"{seg_id}.mmtf", spec)
        index.append({"segment_id": seg_id, "wav": wav, "start_ms": start, "end_ms": end, "word": word,
                      "path": f"{seg_id}.mmtf"})
    (out / "index.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in index))
    record_config(out, "featurize", cfg, {"wav_dir": args.wav_dir, "segments": args.segments})
    print(f"featurized {len(index)} segments, {failures} failed")
    return 1 if failures else 0


def _labeled_spectrograms(args):
    """(spectrograms, word labels) from a featurize index or a spoken-caption manifest."""
    if args.index:
        base = Path(args.index).parent
        specs, words = [], []
        for n, line in enumerate(Path(args.index).read_text().splitlines(), start=1):
            if line.strip():
                row = json.loads(line)
                specs.append(dataset_io.read_tensor(base / row["path"]))
                words.append(row["word"])
        return specs, words
    _, captions = dataset_io.load_dataset(args.manifest)
    specs, words = [], []
    for cap in captions:
        if cap.spectrograms is None or cap.word_texts is None:
            raise DataError(f"caption {cap.caption_id} needs spectrograms and word_texts for pretraining")
        specs.extend(cap.spectrograms)
        words.extend(cap.word_texts)
    return specs, words


def cmd_pretrain(args, cfg):
    if bool(args.index) == bool(args.manifest):
        raise ConfigError("pretrain needs exactly one of --index or --manifest")
    pcfg = _build(wordcnn.PretrainConfig, cfg, "pretrain")
    specs, words = _labeled_spectrograms(args)
    if not specs:
        raise DataError("no labeled spectrograms to train on")
    vocab = sorted(set(words))
    labels = np.array([vocab.index(w) for w in words], dtype=np.int64)
    specs = np.stack(specs)
    val = None
    if not 0 <= cfg["val_fraction"] < 1:
        raise ConfigError("pretrain.val_fraction must lie in [0, 1)")
    if cfg["val_fraction"] > 0:
        order = np.random.default_rng([pcfg.seed, 2]).permutation(len(specs))
        n_val = int(round(cfg["val_fraction"] * len(specs)))
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        val = (specs[val_idx], labels[val_idx])
        specs, labels = specs[train_idx], labels[train_idx]
    arch = _build(wordcnn.CnnArch, {"vocab_size": len(vocab), "n_mels": specs.shape[1], "frames": specs.shape[2],
                                    "channels": cfg["channels"], "hidden": cfg["hidden"],
                                    "dropout": cfg["dropout"]}, "pretrain")
    result = wordcnn.pretrain(specs, labels, len(vocab), pcfg, val=val, arch=arch)
    out = Path(args.out)
    result.params.save(out, seed=pcfg.seed, vocab=vocab)
    _dump(out / "history.json", [dataclasses.asdict(h) for h in result.history])
    record_config(out, "pretrain", cfg, {"index": args.index, "manifest": args.manifest})
    last = result.history[-1] if result.history else None
    if last:
        print(f"pretrained {last.epoch} epochs: train top-1 {last.train_top1:.3f}, top-5 {last.train_top5:.3f}")


def cmd_embed(args, cfg):
    params, _ = wordcnn.WordCnnParams.load(args.params)
    images, captions = dataset_io.load_dataset(args.manifest)
    embedded = []
    for cap in captions:
        if cap.spectrograms is None:
            raise DataError(f"caption {cap.caption_id} has no spectrograms to embed")
        words = wordcnn.embed_words(cap.spectrograms, params, cfg["batch_size"])
        embedded.append(CaptionRecord(cap.caption_id, cap.image_id, words=words, word_texts=cap.word_texts))
    out = Path(args.out)
    dataset_io.write_dataset(out, images, embedded)
    record_config(out, "embed", cfg, {"params": args.params, "manifest": args.manifest})
    print(f"embedded {sum(c.n_words for c in embedded)} words in {len(embedded)} captions")


def cmd_train(args, cfg):
    fcfg = _build(align.FitConfig, cfg, "train")
    images, captions = dataset_io.load_dataset(args.manifest)
    result = align.fit(images, captions, fcfg)
    out = Path(args.out)
    align.save_fit(result, out)
    record_config(out, "train", cfg, {"manifest": args.manifest})
    if result.epoch_costs:
        print(f"trained {len(result.epoch_costs)} epochs: cost {result.epoch_costs[0]:.3f} -> "
              f"{result.epoch_costs[-1]:.3f}")


def cmd_eval(args, cfg):
    if cfg["k"] < 1:
        raise ConfigError("eval.k must be >= 1")
    params, _ = align.AlignParams.load(args.params)
    images, captions = dataset_io.load_dataset(args.manifest)
    if not images or not captions:
        raise DataError("evaluation needs at least one image and one caption")
    search, annotation = retrieval.evaluate(images, captions, params, cfg["normalize_words"])
    reports = [retrieval.report("search", search, cfg["k"]), retrieval.report("annotation", annotation, cfg["k"])]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        retrieval.write_report_json(out / "report.json", reports)
        if cfg["csv"]:
            retrieval.write_report_csv(out / "report.csv", reports)
        record_config(out, "eval", cfg, {"params": args.params, "manifest": args.manifest})
    print(json.dumps(reports, sort_keys=True))
    k = cfg["k"]
    print(f"search R@{k} = {reports[0]['recall']:.3f}, annotation R@{k} = {reports[1]['recall']:.3f}")


def cmd_align(args, cfg):
    params, _ = align.AlignParams.load(args.params)
    images, captions = dataset_io.load_dataset(args.manifest)
    by_id = {img.image_id: img for img in images}
    wanted = set(args.caption_id or [])
    entries = []
    for cap in captions:
        if wanted and cap.caption_id not in wanted:
            continue
        image = by_id[cap.image_id]
        entries.append((image, cap, align.infer_alignment(image, cap, params, cfg["normalize_words"])))
    missing = wanted - {cap.caption_id for _, cap, _ in entries}
    if missing:
        raise DataError(f"unknown caption id(s): {', '.join(sorted(missing))}")
    doc = align.alignments_to_json(entries)
    links = sum(a.displayable for _, _, aligns in entries for a in aligns)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "alignments.json", doc)
        if cfg["svg"]:
            (out / "svg").mkdir(exist_ok=True)
            for image, cap, aligns in entries:
                (out / "svg" / f"{cap.caption_id}.svg").write_text(align.alignment_svg(image, cap, aligns))
        record_config(out, "align", cfg, {"params": args.params, "manifest": args.manifest})
    else:
        print(json.dumps(doc, sort_keys=True))
    print(f"{len(entries)} captions, {links} displayable links", file=sys.stderr if not args.out else sys.stdout)


COMMANDS = {
    "synth": (cmd_synth, "generate a planted-correspondence dataset"),
    "featurize": (cmd_featurize, "word spectrograms from WAV files and a segment list"),
    "pretrain": (cmd_pretrain, "train the word CNN as a word classifier"),
    "embed": (cmd_embed, "replace caption spectrograms by word CNN embeddings"),
    "train": (cmd_train, "fit the alignment model"),
    "eval": (cmd_eval, "image search and annotation recall@k"),
    "align": (cmd_align, "best region for every caption word"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="spokenalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML or JSON file; the [%s] section is used" % name)
        if name == "featurize":
            p.add_argument("--wav-dir", required=True)
            p.add_argument("--segments", required=True, help="CSV: wav,start_ms,end_ms,word[,segment_id]")
        if name == "pretrain":
            p.add_argument("--index", help="index.jsonl written by featurize")
            p.add_argument("--manifest", help="manifest whose captions carry spectrograms and word_texts")
        if name in ("embed", "train", "eval", "align"):
            p.add_argument("--manifest", required=True)
        if name in ("embed", "eval", "align"):
            p.add_argument("--params", required=True, help="parameter directory")
        if name == "align":
            p.add_argument("--caption-id", action="append", help="restrict to these captions (repeatable)")
        p.add_argument("--out", required=name not in ("eval", "align"), help="output directory")
        group = p.add_argument_group("config overrides")
        for key in SECTIONS[name]:
            group.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
        cfg = resolve(args.command, load_config_file(args.config), flags)
        status = COMMANDS[args.command][0](args, cfg)
        return status or 0
    except (SpokenAlignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # invariant violations and bugs
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
