"""Command-line entry point: ``rdft {synth,features,train,eval,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import audio, config as config_mod
from .episodes import (FewShotDataset, derive_seed, episode_stream, make_split, read_split_file,
                       sample_episodes)
from .errors import ConfigError, RdftError
from .meta import CurvatureSet, evaluate, finetune_sweep, meta_train, train_protonet_baseline
from .metrics import (format_summary, summarize, write_metrics_jsonl, write_summary_csv,
                      write_sweep_csv)
from .models import init_encoder, load_checkpoint, save_checkpoint

log = logging.getLogger("rdft")


# -- data ---------------------------------------------------------------------

def _source(cfg):
    if cfg.manifest is not None:
        return {"manifest": str(cfg.manifest), "manifest_text": cfg.manifest.read_text()}
    s = cfg.synthetic
    return {"synthetic": [s.num_classes, s.per_class, s.noise_level, s.amplitude, s.seed]}


def build_raw_dataset(cfg) -> FewShotDataset:
    """Raw (unstandardized) features, served from the cache when its fingerprint matches."""
    fp = audio.source_fingerprint(cfg.mel, _source(cfg))
    if cfg.cache is not None:
        cached = audio.load_feature_cache(cfg.cache, fp)
        if cached is not None:
            log.info("feature cache hit: %s", cfg.cache)
            return cached
    if cfg.manifest is not None:
        ds = audio.build_dataset(cfg.manifest, cfg.mel)
    else:
        s = cfg.synthetic
        ds = audio.synth_tone_dataset(s.num_classes, s.per_class, cfg.mel, s.noise_level,
                                      s.seed, amplitude=s.amplitude)
    if cfg.cache is not None:
        cfg.cache.parent.mkdir(parents=True, exist_ok=True)
        audio.save_feature_cache(cfg.cache, ds, fp)
    return ds


def load_data(cfg):
    ds = build_raw_dataset(cfg)
    if cfg.split_file is not None:
        split = read_split_file(cfg.split_file)
    else:
        split = make_split(ds.classes, cfg.split_seed, cfg.split_fractions)
    split.check_against(ds)
    if cfg.standardize:
        ds = audio.Standardizer.fit(ds, split.train_classes).apply(ds)
    return ds, split


def _test_episodes(cfg, ds, split, count=None):
    m = cfg.meta
    classes = split.test_classes
    if not classes:
        raise ConfigError("split has no test classes")
    return sample_episodes(ds, classes, m.C, m.K, m.Q, cfg.seed,
                           count or cfg.eval_episodes, component="test")


def _write_run_block(cfg, out: Path, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.yaml").write_text(config_mod.dump_config(cfg))


def _load_model(cfg, path):
    params, extra, meta = load_checkpoint(path, cfg.input_shape)
    curv = None
    curv_tensors = {k[len("curv."):]: torch.tensor(v) for k, v in extra.items() if k.startswith("curv.")}
    if curv_tensors:
        curv = CurvatureSet.from_named(curv_tensors)
    return params, curv, meta


# -- commands -------------------------------------------------------------------

def cmd_synth(args, cfg):
    if cfg.synthetic is None:
        raise ConfigError("synth needs a synthetic dataset section")
    out = Path(args.out) if args.out else (cfg.cache or cfg.output_dir / "features.bin")
    cfg = cfg.replace(cache=out)
    ds = build_raw_dataset(cfg)
    print(f"wrote {len(ds)} samples, {len(ds.classes)} classes -> {out}")


def cmd_features(args, cfg):
    if args.manifest:
        cfg = cfg.replace(manifest=Path(args.manifest), synthetic=None)
    if cfg.manifest is None:
        raise ConfigError("features needs a manifest (config dataset.manifest or --manifest)")
    out = Path(args.out) if args.out else (cfg.cache or cfg.output_dir / "features.bin")
    ds = build_raw_dataset(cfg.replace(cache=out))
    print(f"wrote {len(ds)} samples, {len(ds.classes)} classes -> {out}")


def cmd_train(args, cfg):
    if args.algorithm:
        cfg = cfg.replace(meta=cfg.meta.replace(algorithm=args.algorithm))
    if args.updates is not None:
        cfg = cfg.replace(train_episodes=args.updates)
    out = cfg.output_dir
    _write_run_block(cfg, out, "train")
    ds, split = load_data(cfg)
    m = cfg.meta
    params = init_encoder(cfg.input_shape, derive_seed(cfg.seed, "init"))
    stream = episode_stream(ds, split.train_classes, m.C, m.K, m.Q, cfg.seed, "train")
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def record(i, loss):
            fh.write(json.dumps({"update": i, "loss": loss}) + "\n")
            if i % 50 == 0:
                log.info("update %d loss %.4f", i, loss)

        curv = None
        if m.algorithm == "protonet":
            params = train_protonet_baseline(params, stream, m, cfg.train_episodes,
                                             callback=record)
        else:
            params, curv = meta_train(params, None, stream, m, cfg.train_episodes,
                                      callback=lambda i, r: record(i, r.loss))
    extra = {}
    if curv is not None:
        extra = {f"curv.{k}": v.detach().numpy() for k, v in curv.named().items()}
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, params.detach(), extra,
                    {"algorithm": m.algorithm, "seed": cfg.seed, "updates": cfg.train_episodes})
    print(f"checkpoint -> {ckpt}")


def cmd_eval(args, cfg):
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model.ckpt"
    params, curv, meta = _load_model(cfg, ckpt)
    algorithm = meta.get("algorithm", cfg.meta.algorithm)
    mcfg = cfg.meta.replace(algorithm=algorithm)
    ds, split = load_data(cfg)
    episodes = _test_episodes(cfg, ds, split, args.episodes)
    metrics = evaluate(params, curv, episodes, args.finetune, mcfg)
    row = summarize(algorithm, metrics)
    out = cfg.output_dir
    _write_run_block(cfg, out, "eval")
    write_metrics_jsonl(out / "metrics.jsonl", metrics, row)
    write_summary_csv(out / "summary.csv", [row])
    print(format_summary([row]))


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_sweep(args, cfg):
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model.ckpt"
    params, curv, meta = _load_model(cfg, ckpt)
    mcfg = cfg.meta.replace(algorithm=meta.get("algorithm", cfg.meta.algorithm))
    ds, split = load_data(cfg)
    episodes = _test_episodes(cfg, ds, split, args.episodes)
    cells = finetune_sweep(params, episodes, args.alphas, args.steps, mcfg, curv)
    out = cfg.output_dir
    _write_run_block(cfg, out, "sweep")
    write_sweep_csv(out / "sweep.csv", cells)
    for c in cells:
        print(f"alpha={c.alpha:<8g} n={c.n:<3d} delta={c.delta:+.4f}")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdft", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override the global seed")
        return sp

    s = common(sub.add_parser("synth", help="generate the synthetic tone dataset into a feature cache"))
    s.add_argument("--out")
    s = common(sub.add_parser("features", help="extract log-mel features from a manifest into a cache"))
    s.add_argument("--manifest")
    s.add_argument("--out")
    s = common(sub.add_parser("train", help="train protonet / maml_proto / mc_proto"))
    s.add_argument("--algorithm", choices=["protonet", "maml_proto", "mc_proto"])
    s.add_argument("--updates", type=int, help="meta-updates (episodes for protonet)")
    s = common(sub.add_parser("eval", help="evaluate a checkpoint on test episodes"))
    s.add_argument("--checkpoint")
    s.add_argument("--episodes", type=int)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--with-finetune", dest="finetune", action="store_true", default=True)
    g.add_argument("--no-finetune", dest="finetune", action="store_false")
    s = common(sub.add_parser("sweep", help="fine-tuning learning-rate x step-count grid"))
    s.add_argument("--checkpoint")
    s.add_argument("--episodes", type=int)
    s.add_argument("--alphas", type=_float_list, default=[1e-4, 1e-3, 1e-2, 0.2])
    s.add_argument("--steps", type=_int_list, default=[1, 4, 8])
    return p


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load_config(args.config)
        if args.output_dir:
            cfg = cfg.replace(output_dir=Path(args.output_dir))
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        COMMANDS[args.command](args, cfg)
    except RdftError as exc:
        print(f"rdft: {exc.category} error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
