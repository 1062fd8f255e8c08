"""Command-line entry point: gen-data, train, eval, bench, compare, distill, avg-ckpt."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from . import config as C
from .bench import compare_reports, markdown_table, read_reports, run_bench, write_reports
from .decode import DecodeConfig
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .synthdata import (Dataset, SynthParams, load_manifest, standard_split, write_manifest)
from .tensor import ContractError
from .train import (DivergenceError, average_checkpoints, decode_dataset, distill_dataset,
                    init_from_asr, score_outputs, train_loop)

log = logging.getLogger("s2tlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SPLITS = ("train", "valid", "test")


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------ data dirs


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """Turn ``--ns.key value`` / ``--ns.key=value`` leftovers into config pairs."""
    pairs, errs, i = [], [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            errs.append(f"unrecognized argument {tok!r}")
            i += 1
            continue
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            val = extra[i + 1]
            i += 2
        else:
            errs.append(f"{tok} needs a value")
            i += 1
            continue
        pairs.append((key, val))
    if errs:
        raise C.ConfigError(errs)
    return pairs


def _data_pairs(data_dir: Path) -> list[tuple[str, str]]:
    p = data_dir / "data.cfg"
    if not p.exists():
        raise DataError(f"{data_dir}: no data.cfg (run gen-data first)")
    return C.read_pairs(p)


def _load_split(data_dir: Path, split: str, synth: SynthParams) -> Dataset:
    path = data_dir / f"{split}.tsv"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    distilled = None
    kd = data_dir / "distilled.tsv"
    if kd.exists():
        distilled = read_distilled(kd)
    try:
        return load_manifest(path, synth, variant_ok=(split == "train"), distilled=distilled)
    except ContractError as e:
        raise DataError(str(e)) from None


def read_distilled(path: Path) -> dict[int, list[int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            seed, ids = line.split("\t")
            out[int(seed)] = [int(x) for x in ids.split()]
    return out


def _ids(seq) -> str:
    return " ".join(str(int(x)) for x in seq)


# ------------------------------------------------------------ commands


def cmd_gen_data(args, overrides) -> int:
    pairs = [("data.task", args.task), ("data.seed", str(args.seed))]
    pairs += [(f"data.{k}", str(v)) for k, v in
              (("n_train", args.n_train), ("n_valid", args.n_valid), ("n_test", args.n_test)) if v is not None]
    if args.langs is not None:
        pairs.append(("data.n_langs", str(args.langs)))
    cfg = C.load(args.config, pairs + overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    for split, n in zip(SPLITS, (d.n_train, d.n_valid, d.n_test)):
        write_manifest(out / f"{split}.tsv", standard_split(split, d.seed, n, d.task, d.synth))
    (out / "data.cfg").write_text(C.dump(cfg, ("data",)))
    print(f"wrote {out}/{{train,valid,test}}.tsv")
    return EXIT_OK


def _experiment(args, overrides, data_dir: Path) -> C.ExperimentConfig:
    base = C.load(args.config, overrides)
    pairs = _data_pairs(data_dir)
    cfg = C.build(pairs, base=base)
    v = cfg.data.synth.vocab
    cfg.model.vocab_size = v.size
    cfg.model.n_features = cfg.data.synth.n_features
    errs = cfg.errors()
    if errs:
        raise C.ConfigError(errs)
    return cfg


def cmd_train(args, overrides) -> int:
    data_dir = Path(args.data)
    cfg = _experiment(args, overrides, data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(C.dump(cfg))
    synth = cfg.data.synth
    train_set = _load_split(data_dir, "train", synth)
    valid_set = _load_split(data_dir, "valid", synth)
    model = build_model(cfg.model, cfg.train.seed)
    if args.init_from:
        init_from_asr(model, load_checkpoint(args.init_from))
    metric = "wer" if cfg.data.task == "asr" else "bleu"
    res = train_loop(model, train_set, valid_set, cfg.train, cfg.augment, out, metric,
                     dataclasses.replace(cfg.decode, beam=1))
    print(f"{res.steps} steps; averaged checkpoint: {res.avg_path}")
    return EXIT_OK


def _model_from_run(ckpt: Path, cfg_path: Path | None) -> tuple[C.ExperimentConfig, object]:
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint {ckpt} not found")
    cfg_path = Path(cfg_path) if cfg_path else Path(ckpt).parent / "config.cfg"
    if not cfg_path.exists():
        raise DataError(f"no run config at {cfg_path}")
    cfg = C.load(cfg_path)
    model = build_model(cfg.model, cfg.train.seed)
    try:
        model.load_state_dict(load_checkpoint(ckpt))
    except (ContractError, KeyError) as e:
        raise DataError(str(e)) from None
    model.eval()
    return cfg, model


def cmd_eval(args, overrides) -> int:
    cfg, model = _model_from_run(Path(args.ckpt), args.run_config)
    cfg = C.build(overrides, base=cfg)
    data_dir = Path(args.data)
    task = dict(_data_pairs(data_dir)).get("data.task")
    if task != cfg.data.task:
        log.warning("evaluating a %s model on %s data", cfg.data.task, task)
    ds = _load_split(data_dir, args.split, cfg.data.synth)
    hyps = decode_dataset(model, ds, cfg.decode, greedy=args.greedy)
    scores = score_outputs(ds, hyps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.tsv", "w") as fh:
        for ex, h in zip(ds, hyps):
            fh.write(f"{ex.seed}\t{_ids(ex.target)}\t{_ids(h)}\n")
    summary = {"n_examples": len(ds), "split": args.split, "beam": 1 if args.greedy else cfg.decode.beam,
               "length_penalty": cfg.decode.length_penalty, "no_repeat_ngram": cfg.decode.no_repeat_ngram,
               **scores, "note": "BLEU over token ids; not comparable to detokenized sacreBLEU"}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.cfg").write_text(C.dump(cfg))
    print(json.dumps({k: scores[k] for k in ("wer", "bleu", "acc")}))
    return EXIT_OK


def cmd_bench(args, overrides) -> int:
    cfg, model = _model_from_run(Path(args.ckpt), args.run_config)
    cfg = C.build(overrides, base=cfg)
    ds = _load_split(Path(args.data), args.split, cfg.data.synth)
    if args.n:
        ds = Dataset(ds.examples[:args.n], ds.params)
    rep = run_bench(model, ds, cfg.decode, args.label)
    write_reports(args.out, [rep])
    print(f"{rep.label}: {rep.macs_per_token:.0f} MACs/token, peak {rep.peak_live_elements} elements")
    return EXIT_OK


def cmd_compare(args, overrides) -> int:
    reports = [r for p in args.reports for r in read_reports(p)]
    table = markdown_table(compare_reports(reports, args.baseline))
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_distill(args, overrides) -> int:
    cfg, teacher = _model_from_run(Path(args.ckpt), args.run_config)
    cfg = C.build(overrides, base=cfg)
    data_dir = Path(args.data)
    data_cfg = C.build(_data_pairs(data_dir))
    if data_cfg.data.task != cfg.data.task:
        raise DataError(f"teacher trained on {cfg.data.task}, data is {data_cfg.data.task}")
    src = _load_split(data_dir, "train", cfg.data.synth)
    res = distill_dataset(teacher, src, cfg.decode, greedy=args.greedy)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "distilled.tsv", "w") as fh:
        for ex in res.distilled:
            fh.write(f"{ex.seed}\t{_ids(ex.target)}\n")
    write_manifest(out / "train.tsv", res.combined)
    for split in ("valid", "test"):
        shutil.copyfile(data_dir / f"{split}.tsv", out / f"{split}.tsv")
    shutil.copyfile(data_dir / "data.cfg", out / "data.cfg")
    print(f"{len(res.distilled)} distilled targets ({res.n_kept_original} kept original); "
          f"combined train manifest has {len(res.combined)} rows")
    return EXIT_OK


def cmd_avg_ckpt(args, overrides) -> int:
    paths = [Path(p) for p in args.checkpoints]
    for p in paths:
        if not p.exists():
            raise DataError(f"checkpoint {p} not found")
    save_checkpoint(args.out, average_checkpoints(paths, args.k or len(paths)))
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s2tlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/valid/test manifests")
    g.add_argument("--task", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, help="default: data.n_train of the config (12000)")
    g.add_argument("--n-valid", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--langs", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes checkpoints, metrics.csv, avg.ckpt")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-from", help="ASR checkpoint supplying the speech-side weights")
    t.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "decode a split and score it"),
                          ("bench", cmd_bench, "measure decoding cost"),
                          ("distill", cmd_distill, "build an Original+seqKD training set")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--config", "--run-config", dest="run_config",
                       help="resolved config of the run (default: config.cfg next to the checkpoint)")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        if name != "distill":
            p.add_argument("--split", default="test", choices=SPLITS)
        else:
            p.add_argument("--force", action="store_true")
        if name == "bench":
            p.add_argument("--label", required=True)
            p.add_argument("--n", type=int, default=0, help="use only the first n examples")
        else:
            p.add_argument("--greedy", action="store_true")
        p.set_defaults(fn=fn)

    c = sub.add_parser("compare", help="ratio table from bench reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--baseline", required=True)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    a = sub.add_parser("avg-ckpt", help="average checkpoints (given in step order)")
    a.add_argument("checkpoints", nargs="+")
    a.add_argument("--k", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_avg_ckpt)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(extra)
        return args.fn(args, overrides)
    except C.ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
