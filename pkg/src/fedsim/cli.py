"""Command line driver.

Commands::

    fedsim prepare --config cfg.json [--out DIR] [--seed-override N]
    fedsim run     --config cfg.json [--out DIR] [--workers N] [--seed-override N]
    fedsim baseline --config cfg.json [--out DIR] [--seed-override N]
    fedsim compare INDEPENDENT_DIR FEDERATED_DIR [--out DIR]
    fedsim report  RUN_DIR

Exit codes: 0 success, 1 configuration/validation error, 2 I/O or data
error (message carries file and line where known), 3 runtime failure.

All artifacts land in the experiment's output directory: ``corpus.jsonl``
(synthetic runs), ``manifest.json``, ``shards.jsonl`` from prepare;
``trace.jsonl``, ``report.json``, ``categories.csv``, ``params.bin``,
``resolved_config.json`` from run; ``baseline_report.json`` and
``baseline_clients.json`` from baseline; ``comparison.csv`` /
``comparison.txt`` from compare.  Reruns with an unchanged config produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import fedcore, metrics, partition, peft, refmodel, synth
from .config import ExperimentConfig
from .errors import ConfigError, FedsimError, RecordError, SchemaError


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_seed_override(args.seed_override)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)

    if cfg.dataset.synthetic is not None:
        corpus_path = out / "corpus.jsonl"
        synth.write_corpus_jsonl(cfg.dataset.synthetic, corpus_path)
    else:
        corpus_path = Path(cfg.dataset.path)
    dataset = corpus_mod.load_jsonl(corpus_path, cfg.dataset.form)
    dataset = corpus_mod.clean_min_count(dataset, cfg.corpus.min_count)
    if len(dataset) == 0:
        raise ConfigError("no samples left after category cleaning")

    train, test = corpus_mod.split_train_test(
        dataset, cfg.corpus.train_fraction, cfg.corpus.seed
    )
    vocab = corpus_mod.build_vocab(train, cfg.corpus.vocab_max_size)
    shards = partition.make_partition(train, cfg.partition)
    partition.export_shards_jsonl(shards, out / "shards.jsonl")

    corpus_mod.write_manifest(
        out / "manifest.json",
        form=cfg.dataset.form,
        vocab=vocab,
        train=train,
        test=test,
        max_len=cfg.corpus.max_len,
        shards=[
            {"client_id": sh.client_id, "sample_ids": list(sh.sample_ids)}
            for sh in shards
        ],
        settings={
            "corpus": {
                "max_len": cfg.corpus.max_len,
                "vocab_max_size": cfg.corpus.vocab_max_size,
                "min_count": cfg.corpus.min_count,
                "train_fraction": cfg.corpus.train_fraction,
                "seed": cfg.corpus.seed,
            },
            "partition": cfg.partition.to_dict(),
        },
    )

    print(f"prepared {len(train)} train / {len(test)} test samples, "
          f"vocab {len(vocab)}, {len(shards)} shards -> {out}")
    for name, ds in (("train", train), ("test", test)):
        for cat, count in ds.label_histogram.items():
            print(f"  {name} {cat}: {count}")
    return 0


def _load_prepared(out: Path):
    manifest = out / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}; run prepare first")
    return corpus_mod.load_manifest(manifest)


def _client_datasets(prepared) -> list[fedcore.ClientData]:
    by_id = {rec["id"]: rec for rec in prepared.train}
    clients = []
    for sh in sorted(prepared.shards, key=lambda s: s["client_id"]):
        recs = [by_id[sid] for sid in sh["sample_ids"]]
        ids, labels, _ = corpus_mod.sample_arrays(recs, prepared.max_len)
        clients.append(
            fedcore.ClientData(
                client_id=sh["client_id"], token_ids=ids, labels=labels
            )
        )
    return clients


def _build_model(cfg: ExperimentConfig, prepared) -> refmodel.ParamSet:
    model_config = refmodel.ModelConfig(
        vocab_size=len(prepared.vocab),
        embed_dim=cfg.model.embed_dim,
        n_blocks=cfg.model.n_blocks,
        hidden_dim=cfg.model.hidden_dim,
        n_classes=cfg.model.n_classes,
        max_len=prepared.max_len,
        seed=cfg.model.seed,
    )
    return peft.attach(cfg.scheme, refmodel.init(model_config))


def _workers(cfg: ExperimentConfig) -> int:
    return cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)


def _write_resolved_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "resolved_config.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    prepared = _load_prepared(out)

    clients = _client_datasets(prepared)
    ids, labels, cats = corpus_mod.sample_arrays(prepared.test, prepared.max_len)
    test = fedcore.TestData(token_ids=ids, labels=labels, categories=cats)
    params = _build_model(cfg, prepared)

    result = fedcore.run_federation(
        cfg.federation,
        params,
        clients,
        test,
        workers=_workers(cfg),
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=out if cfg.checkpoint_every else None,
    )

    with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for row in result.trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    metrics.write_report_json(result.report, out / "report.json")
    metrics.write_report_csv(result.report, out / "categories.csv")
    refmodel.save_params(result.final_params, out / "params.bin")
    if result.pool is not None:
        pool_params = result.final_params.clone()
        for k, vec in enumerate(result.pool):
            pool_params.set_hot_vector(vec)
            refmodel.save_params(pool_params, out / f"pool_{k:02d}.bin")
    _write_resolved_config(cfg, out)

    r = result.report
    print(
        f"{cfg.federation.algorithm}/{cfg.scheme.kind}: "
        f"accuracy {r.accuracy:.4f}  precision {r.precision:.4f}  "
        f"recall {r.recall:.4f}  f1 {r.f1:.4f}  -> {out}"
    )
    return 0


def _aggregate_reports(reports: list[metrics.EvaluationReport]) -> metrics.EvaluationReport:
    """Unweighted mean of client reports (rates averaged, confusion summed)."""
    cats = sorted(reports[0].per_category)
    per_cat = {
        c: metrics.CategoryStat(
            n_samples=reports[0].per_category[c].n_samples,
            detection_rate=float(
                np.mean([r.per_category[c].detection_rate for r in reports])
            ),
        )
        for c in cats
    }
    confusion = {
        k: int(sum(r.confusion[k] for r in reports)) for k in ("tp", "fp", "tn", "fn")
    }
    return metrics.EvaluationReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        per_category=per_cat,
        confusion=confusion,
    )


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    prepared = _load_prepared(out)

    clients = _client_datasets(prepared)
    ids, labels, cats = corpus_mod.sample_arrays(prepared.test, prepared.max_len)
    test = fedcore.TestData(token_ids=ids, labels=labels, categories=cats)
    params = _build_model(cfg, prepared)

    reports = []
    for client in clients:
        reports.append(
            metrics.independent_baseline(client, cfg.federation, params, test)
        )
    aggregate = _aggregate_reports(reports)

    metrics.write_report_json(aggregate, out / "baseline_report.json")
    (out / "baseline_clients.json").write_text(
        json.dumps(
            {str(c.client_id): r.to_dict() for c, r in zip(clients, reports)},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )

    print(
        f"isolated baseline over {len(clients)} clients: "
        f"mean accuracy {aggregate.accuracy:.4f}  mean f1 {aggregate.f1:.4f}  -> {out}"
    )
    return 0


def _report_for_side(run_dir: Path, prefer: str = "report.json") -> metrics.EvaluationReport:
    other = (
        "baseline_report.json" if prefer == "report.json" else "report.json"
    )
    for name in (prefer, other):
        p = run_dir / name
        if p.exists():
            return metrics.load_report_json(p)
    raise FileNotFoundError(f"no report.json or baseline_report.json in {run_dir}")


def cmd_compare(args) -> int:
    independent = _report_for_side(
        Path(args.independent_dir), prefer="baseline_report.json"
    )
    federated = _report_for_side(Path(args.federated_dir))
    table = metrics.compare(independent, federated)

    out = Path(args.out) if args.out else Path(args.federated_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_comparison_csv(table, out / "comparison.csv")
    text = metrics.format_comparison_text(table)
    (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    report = _report_for_side(run_dir)
    print(f"report for {run_dir}:")
    print(
        f"  accuracy {report.accuracy:.4f}  precision {report.precision:.4f}  "
        f"recall {report.recall:.4f}  f1 {report.f1:.4f}"
    )
    c = report.confusion
    print(f"  confusion tp={c['tp']} fp={c['fp']} tn={c['tn']} fn={c['fn']}")
    for cat in sorted(report.per_category):
        st = report.per_category[cat]
        print(f"  {cat}: n={st.n_samples} detection_rate={st.detection_rate:.4f}")
    trace = run_dir / "trace.jsonl"
    if trace.exists():
        lines = trace.read_text(encoding="utf-8").splitlines()
        if lines:
            last = json.loads(lines[-1])
            print(
                f"  last round {last['round']}: mean_train_loss "
                f"{last['mean_train_loss']:.4f} f1 {last['f1']:.4f}"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Desk-scale federated learning simulator for code "
        "vulnerability classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="override the config's output_dir")
        p.add_argument(
            "--seed-override", type=int, default=None,
            help="re-seed every section from this value",
        )

    p = sub.add_parser("prepare", help="build corpus, vocab, split and shards")
    add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="run the federated training loop")
    add_config_flags(p)
    p.add_argument(
        "--workers", type=int, default=None,
        help="local-training worker processes (default: available cores)",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baseline", help="train isolated per-client baselines")
    add_config_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("compare", help="independent vs federated rate table")
    p.add_argument("independent_dir")
    p.add_argument("federated_dir")
    p.add_argument("--out", help="directory for comparison files")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="print a run summary")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RecordError, SchemaError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
