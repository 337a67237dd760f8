"""Command-line surface: gen-data, make-labels, pretrain, probe, report,
compare.

A run directory is one reproducible experiment:

    run_dir/
      config.json      echo of the experiment config
      corpus.mpld      synthetic corpus
      labels.mplb      pseudo-label bundle
      checkpoint.mplc  trained model + optimizer + rng state
      loss.csv         training log
      probes/*.json    one probe result per task
      report/          weights.csv, metrics.csv, heatmap.svg

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict

import click
import numpy as np

from .corpus import Corpus, CorpusSpec, generate_corpus, load_corpus, save_corpus
from .encoder import EncoderConfig
from .labeler import build_labels, load_bundle, save_bundle
from .masking import MaskPolicy
from .objective import plan_single, plan_triple
from .pretrain import (TrainConfig, load_checkpoint, pretrain, save_checkpoint,
                       write_loss_csv)
from .probe import ProbeConfig, ProbeTask, save_probe_result, train_probe
from .report import compare as compare_runs
from .report import write_report

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


def load_config(path, seed_override=None, out_override=None) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if seed_override is not None:
        cfg["seed"] = seed_override
    if out_override is not None:
        cfg["out_dir"] = out_override
    for key in ("seed", "out_dir"):
        if key not in cfg:
            raise ConfigError(f"config is missing required key {key!r}")
    return cfg


def _corpus_spec(cfg) -> CorpusSpec:
    c = dict(cfg.get("corpus", {}))
    c.pop("path", None)
    c.setdefault("seed", cfg["seed"])
    try:
        return CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in c.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad corpus spec: {e}")


def _encoder_config(cfg, corpus_spec: CorpusSpec) -> EncoderConfig:
    e = dict(cfg.get("encoder", {}))
    e.setdefault("input_dim", corpus_spec.feature_dim)
    e.setdefault("max_frames", corpus_spec.max_frames())
    e.setdefault("seed", cfg["seed"])
    try:
        return EncoderConfig(**e)
    except (TypeError, ValueError) as e_:
        raise ConfigError(f"bad encoder config: {e_}")


def _plan(cfg, encoder_config: EncoderConfig):
    p = cfg.get("plan", {"mode": "single"})
    sizes = cfg.get("labels", {}).get("sizes", [64, 48, 32])
    try:
        if p["mode"] == "single":
            return plan_single(encoder_config.num_layers, min(sizes))
        if p["mode"] == "triple":
            return plan_triple(p["loc500"], encoder_config.num_layers, sorted(sizes, reverse=True))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad plan config: {e}")
    raise ConfigError(f"unknown plan mode {p.get('mode')!r}")


def _train_config(cfg) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    t.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}")


def _mask_policy(cfg) -> MaskPolicy:
    m = dict(cfg.get("mask", {}))
    try:
        return MaskPolicy(**m)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad mask policy: {e}")


def _probe_config(cfg) -> ProbeConfig:
    p = dict(cfg.get("probe", {}))
    p.setdefault("seed", cfg["seed"])
    try:
        return ProbeConfig(**p)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad probe config: {e}")


def _run_dir(cfg):
    d = cfg["out_dir"]
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    return d


def _get_corpus(cfg, run_dir) -> Corpus:
    path = cfg.get("corpus", {}).get("path") or os.path.join(run_dir, "corpus.mpld")
    if not os.path.exists(path):
        raise ConfigError(f"corpus file {path} not found; run gen-data first")
    return load_corpus(path)


def _handle(fn):
    try:
        fn()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except Exception as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_RUNTIME)
    sys.exit(0)


def _common_opts(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=False))(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None)(fn)
    return fn


@click.group()
def main():
    """Masked-prediction placement workbench."""


@main.command("gen-data")
@_common_opts
def gen_data(config_path, seed, out_dir):
    def run():
        cfg = load_config(config_path, seed, out_dir)
        d = _run_dir(cfg)
        spec = _corpus_spec(cfg)
        corpus = generate_corpus(spec)
        save_corpus(corpus, os.path.join(d, "corpus.mpld"))
        click.echo(f"wrote {os.path.join(d, 'corpus.mpld')}")
    _handle(run)


@main.command("make-labels")
@_common_opts
def make_labels(config_path, seed, out_dir):
    def run():
        cfg = load_config(config_path, seed, out_dir)
        d = _run_dir(cfg)
        corpus = _get_corpus(cfg, d)
        lab = cfg.get("labels", {})
        bundle = build_labels(
            corpus,
            strategy=lab.get("strategy", "CA1"),
            sizes=lab.get("sizes", [64, 48, 32]),
            subset_frac=lab.get("subset_frac", 0.1),
            seed=cfg["seed"],
        )
        save_bundle(bundle, os.path.join(d, "labels.mplb"))
        click.echo(f"wrote {os.path.join(d, 'labels.mplb')}")
    _handle(run)


@main.command("pretrain")
@_common_opts
def pretrain_cmd(config_path, seed, out_dir):
    def run():
        cfg = load_config(config_path, seed, out_dir)
        d = _run_dir(cfg)
        corpus = _get_corpus(cfg, d)
        bundle = load_bundle(os.path.join(d, "labels.mplb"), corpus.spec.feature_dim)
        enc_cfg = _encoder_config(cfg, corpus.spec)
        plan = _plan(cfg, enc_cfg)
        tcfg = _train_config(cfg)
        state, log = pretrain(corpus, bundle, enc_cfg, plan, tcfg,
                              mask_policy=_mask_policy(cfg))
        save_checkpoint(state, os.path.join(d, "checkpoint.mplc"))
        write_loss_csv(log, os.path.join(d, "loss.csv"))
        click.echo(f"wrote {os.path.join(d, 'checkpoint.mplc')}")
    _handle(run)


@main.command("probe")
@_common_opts
def probe_cmd(config_path, seed, out_dir):
    def run():
        cfg = load_config(config_path, seed, out_dir)
        d = _run_dir(cfg)
        corpus = _get_corpus(cfg, d)
        state = load_checkpoint(os.path.join(d, "checkpoint.mplc"))
        pcfg = _probe_config(cfg)
        os.makedirs(os.path.join(d, "probes"), exist_ok=True)
        tasks = [
            ProbeTask("frame_content", corpus.spec.num_content_units),
            ProbeTask("utterance_speaker", corpus.spec.num_speakers),
        ]
        for task in tasks:
            result = train_probe(state.model(), task, corpus, pcfg)
            save_probe_result(result, os.path.join(d, "probes", f"{task.kind}.json"))
            click.echo(f"{task.kind}: accuracy {result.metric:.4f}")
    _handle(run)


@main.command("report")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.argument("probe_jsons", nargs=-1, type=click.Path(exists=True))
def report_cmd(out_dir, probe_jsons):
    def run():
        if not probe_jsons:
            raise ConfigError("need at least one probe result")
        results = []
        for p in probe_jsons:
            with open(p) as f:
                results.append(json.load(f))
        write_report(results, out_dir)
        click.echo(f"wrote report to {out_dir}")
    _handle(run)


@main.command("compare")
@click.argument("run_dir_a", type=click.Path(exists=True))
@click.argument("run_dir_b", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None)
def compare_cmd(run_dir_a, run_dir_b, out_path):
    def run():
        rep = compare_runs(run_dir_a, run_dir_b)
        text = json.dumps(rep.to_json_dict(), indent=2, sort_keys=True)
        if out_path:
            with open(out_path, "w") as f:
                f.write(text + "\n")
        click.echo(text)
    _handle(run)


if __name__ == "__main__":
    main()
