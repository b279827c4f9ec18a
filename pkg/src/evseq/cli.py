"""Config-driven command line front end.

Every run writes into a fresh directory named from the config hash and a
timestamp, with the resolved config echoed verbatim, so past runs are
never partially overwritten and any experiment can be re-executed
bit-identically from its own directory. Exit code 1 marks a config
validation error (reported with a JSON-pointer path), 2 a runtime
failure.
"""

import hashlib
import json
import logging
import os
import sys
import time

import click
import jsonschema
import numpy as np

from . import data as D
from . import hpo as H
from . import models as M
from . import pendulum as P
from . import stats as S
from . import stress as X

log = logging.getLogger("evseq")


def _setup_logging():
    level = os.environ.get("EVSEQ_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# ---------------------------------------------------------------------------
# experiment config

_PARAM_SCHEMA = {
    "type": "object",
    "required": ["name", "type"],
    "properties": {
        "name": {"type": "string"},
        "type": {"enum": ["real", "int", "cat"]},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
        "log": {"type": "boolean"},
        "choices": {"type": "array", "minItems": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed", "dataset", "method"],
    "properties": {
        "seed": {"type": "integer"},
        "dataset": {
            "type": "object",
            "properties": {
                "path": {"type": "string"},
                "schema": {"type": "string"},
                "pendulum": {
                    "type": "object",
                    "required": ["n"],
                    "properties": {"n": {"type": "integer", "minimum": 1},
                                   "seed": {"type": "integer"}},
                },
                "test_fraction": {"type": "number",
                                  "exclusiveMinimum": 0,
                                  "exclusiveMaximum": 1},
            },
        },
        "method": {
            "type": "object",
            "required": ["name", "kind"],
            "properties": {
                "name": {"type": "string"},
                "kind": {"enum": [M.MLP, M.GRU, M.TIME_ATTENTION]},
                "encoder": {"type": "object"},
                "train": {"type": "object"},
                "pretrain": {"enum": ["coles", None]},
            },
        },
        "space": {"type": "array", "items": _PARAM_SCHEMA},
        "protocol": {
            "type": "object",
            "properties": {
                "n_hpo": {"type": "integer", "minimum": 1},
                "n_seeds": {"type": "integer", "minimum": 1},
                "hpo_fractions": {"type": "array", "minItems": 3,
                                  "maxItems": 3,
                                  "items": {"type": "number"}},
            },
        },
        "stress": {"type": "array",
                   "items": {"enum": list(X.STRESS_KINDS)}},
        "scaling_sizes": {"type": "array",
                          "items": {"type": "integer", "minimum": 1}},
    },
}


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        click.echo(f"config error at {pointer}: {exc.message}", err=True)
        sys.exit(1)
    dcfg = cfg["dataset"]
    if "pendulum" not in dcfg and "path" not in dcfg:
        click.echo("config error at /dataset: need 'path' or 'pendulum'",
                   err=True)
        sys.exit(1)
    for key in ("path", "schema"):
        if key in dcfg and not os.path.exists(dcfg[key]):
            click.echo(f"config error at /dataset/{key}: "
                       f"no such file '{dcfg[key]}'", err=True)
            sys.exit(1)
    return cfg


def make_run_dir(cfg, out_root, resume=None):
    if resume:
        if not os.path.isdir(resume):
            raise click.ClickException(f"no run directory '{resume}'")
        return resume
    blob = json.dumps(cfg, sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:10]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out_root, f"run-{digest}-{stamp}")
    run_dir = base
    n = 1
    while True:
        try:
            os.makedirs(run_dir, exist_ok=False)
            break
        except FileExistsError:
            run_dir = f"{base}.{n}"
            n += 1
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir


def build_space(cfg):
    params = []
    for p in cfg.get("space", []):
        if p["type"] == "real":
            params.append(H.RealParam(p["name"], p["lo"], p["hi"],
                                      p.get("log", False)))
        elif p["type"] == "int":
            params.append(H.IntParam(p["name"], int(p["lo"]), int(p["hi"])))
        else:
            params.append(H.CatParam(p["name"], tuple(p["choices"])))
    return H.ParamSpace(tuple(params))


def build_spec(cfg):
    m = cfg["method"]
    encoder = dict(m.get("encoder", {}))
    encoder["kind"] = m["kind"]
    return H.MethodSpec.make(m["name"], encoder=encoder,
                             train=m.get("train", {}),
                             pretrain=m.get("pretrain"))


def load_dataset(cfg):
    dcfg = cfg["dataset"]
    if "pendulum" in dcfg:
        pc = dcfg["pendulum"]
        synth = P.SynthConfig(n_sequences=pc["n"],
                              seed=pc.get("seed", cfg["seed"]))
        ds = P.generate_pendulum_dataset(synth)
    else:
        schema = D.read_schema(dcfg["schema"])
        ds = D.ingest_jsonl(dcfg["path"], schema)
    frac = dcfg.get("test_fraction", 0.15)
    test, pool = D.holdout_test(ds, frac, seed=cfg["seed"])
    return ds.with_audit(test), list(pool), list(test)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _audit_report(ds, path):
    pre_scoring = [e for e in ds.audit.entries
                   if e[0] not in ("test-scoring",)] if ds.audit else []
    _write_json(path, {"reads_before_scoring": pre_scoring,
                       "clean": not pre_scoring})
    return not pre_scoring


def _runtime(fn):
    try:
        return fn()
    except (ValueError, RuntimeError, OSError, M.TrainingDiverged) as exc:
        log.error("runtime failure: %s", exc)
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


# ---------------------------------------------------------------------------
# commands

@click.group()
def main():
    """Event-sequence benchmark engine."""
    _setup_logging()


@main.command("generate-pendulum")
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
def generate_pendulum(n, seed, out):
    """Generate the synthetic pendulum dataset as JSONL + schema sidecar."""
    def run():
        ds = P.generate_pendulum_dataset(
            P.SynthConfig(n_sequences=n, seed=seed))
        D.emit_jsonl(ds, out)
        click.echo(f"wrote {len(ds)} sequences to {out}")
    _runtime(run)


@main.command()
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
def ingest(data, schema):
    """Validate a JSONL dataset and print summary statistics."""
    def run():
        ds = D.ingest_jsonl(data, D.read_schema(schema))
        lengths = [len(s) for s in ds.sequences]
        click.echo(f"sequences: {len(ds)}")
        click.echo(f"events/sequence: {np.mean(lengths):.1f} "
                   f"± {np.std(lengths):.1f}")
        click.echo(f"re-sorted: {ds.n_resorted}")
    _runtime(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(), default="runs")
def split(config_path, out):
    """Materialize the held-out test set and the fixed HPO split."""
    cfg = load_config(config_path)

    def run():
        run_dir = make_run_dir(cfg, out)
        ds, pool, test = load_dataset(cfg)
        fr = tuple(cfg.get("protocol", {}).get("hpo_fractions",
                                               H.HPO_FRACTIONS))
        sp = D.stratified_split(ds, fr, seed=cfg["seed"], pool=pool,
                                test=test)
        _write_json(os.path.join(run_dir, "split.json"),
                    {"seed": cfg["seed"], "train": list(sp.train),
                     "train_val": list(sp.train_val),
                     "hpo_val": list(sp.hpo_val), "test": list(sp.test)})
        click.echo(run_dir)
    _runtime(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(), default="runs")
@click.option("--resume", type=click.Path(), default=None,
              help="existing run directory to continue from its trial log")
def hpo(config_path, out, resume):
    """Run the TPE search on the fixed split and record the BHP."""
    cfg = load_config(config_path)

    def run():
        run_dir = make_run_dir(cfg, out, resume=resume)
        ds, pool, test = load_dataset(cfg)
        fr = tuple(cfg.get("protocol", {}).get("hpo_fractions",
                                               H.HPO_FRACTIONS))
        sp = D.stratified_split(ds, fr, seed=cfg["seed"], pool=pool,
                                test=test)
        result = H.hpo_run(
            ds, sp, build_spec(cfg), build_space(cfg),
            n_hpo=cfg.get("protocol", {}).get("n_hpo", 50),
            seed=cfg["seed"],
            trial_log=os.path.join(run_dir, "trials.jsonl"),
            resume=resume is not None)
        _write_json(os.path.join(run_dir, "best_params.json"),
                    result.best_params)
        _audit_report(ds, os.path.join(run_dir, "audit.json"))
        n_done = sum(1 for t in result.trials if t.state == "completed")
        click.echo(f"{run_dir}: {n_done}/{len(result.trials)} trials "
                   f"completed, best params in best_params.json")
    _runtime(run)


def _load_bhp(cfg, bhp_path):
    if bhp_path:
        with open(bhp_path) as fh:
            return json.load(fh)
    return {}


@main.command("final-eval")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--bhp", "bhp_path", type=click.Path(exists=True),
              default=None, help="best_params.json from an hpo run")
@click.option("--out", type=click.Path(), default="runs")
@click.option("--jobs", type=int, default=os.cpu_count())
def final_eval_cmd(config_path, bhp_path, out, jobs):
    """Retrain over fresh resplits with many seeds and score the test set."""
    cfg = load_config(config_path)

    def run():
        run_dir = make_run_dir(cfg, out)
        ds, pool, test = load_dataset(cfg)
        records = H.final_eval(
            ds, pool, test, build_spec(cfg), _load_bhp(cfg, bhp_path),
            n_seeds=cfg.get("protocol", {}).get("n_seeds", 20),
            master_seed=cfg["seed"], jobs=jobs,
            dataset_name=cfg["dataset"].get("path", "pendulum"))
        with open(os.path.join(run_dir, "records.jsonl"), "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_json()) + "\n")
        _audit_report(ds, os.path.join(run_dir, "audit.json"))
        mean, std = H.summarize(records)
        click.echo(f"{run_dir}: test {records[0].metric_name} = "
                   f"{mean:.3f} ± {std:.3f}")
    _runtime(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--bhp", "bhp_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", type=click.Path(), default="runs")
@click.option("--jobs", type=int, default=os.cpu_count())
def stress(config_path, bhp_path, out, jobs):
    """Run the configured stress kinds against freshly trained models."""
    cfg = load_config(config_path)

    def run():
        run_dir = make_run_dir(cfg, out)
        ds, pool, test = load_dataset(cfg)
        spec = build_spec(cfg)
        bhp = _load_bhp(cfg, bhp_path)
        n_seeds = cfg.get("protocol", {}).get("n_seeds", 20)
        records, trained = H.final_eval(
            ds, pool, test, spec, bhp, n_seeds=n_seeds,
            master_seed=cfg["seed"], jobs=jobs, keep_models=True,
            dataset_name=cfg["dataset"].get("path", "pendulum"))
        runs = {spec.name: list(zip(
            [r for r in records if r.state == "completed"], trained))}
        pre = D.preprocess(ds, pool)
        for kind in cfg.get("stress", list(X.STRESS_KINDS)):
            report = X.stress_eval(runs, pre, test, kind,
                                   master_seed=cfg["seed"])
            base = os.path.join(run_dir, f"stress-{kind}")
            with open(base + ".csv", "w") as fh:
                fh.write(report.to_csv())
            with open(base + ".md", "w") as fh:
                fh.write(report.to_markdown())
            for row in report.rows:
                star = "*" if row.significant else ""
                click.echo(f"{kind} {row.method}: "
                           f"{row.relative_drop_pct:.2f} %{star}")
        click.echo(run_dir)
    _runtime(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--bhp", "bhp_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", type=click.Path(), default="runs")
@click.option("--jobs", type=int, default=os.cpu_count())
def scaling(config_path, bhp_path, out, jobs):
    """Retrain on growing training-pool subsamples and chart the trend."""
    cfg = load_config(config_path)

    def run():
        run_dir = make_run_dir(cfg, out)
        ds, pool, test = load_dataset(cfg)
        sizes = cfg.get("scaling_sizes", [1000, 3000, 10000])
        results = H.scaling_study(
            ds, pool, test, [(build_spec(cfg), _load_bhp(cfg, bhp_path))],
            sizes, master_seed=cfg["seed"], jobs=jobs)
        with open(os.path.join(run_dir, "scaling.csv"), "w") as fh:
            fh.write(H.scaling_csv(results))
        click.echo(run_dir)
    _runtime(run)


@main.command()
@click.option("--records", "record_paths", type=click.Path(exists=True),
              multiple=True, required=True,
              help="records.jsonl files, one or more")
@click.option("--out", type=click.Path(), default=None)
@click.option("--alpha", type=float, default=0.01)
def compare(record_paths, out, alpha):
    """Rank methods from accumulated run records, shared ranks under ties."""
    def run():
        by_method = {}
        for path in record_paths:
            with open(path) as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    r = S.RunRecord.from_json(json.loads(line))
                    if r.state == "completed":
                        by_method.setdefault(r.method, []).append(
                            r.split_metrics["test"])
        report = S.rank_groups(by_method, alpha=alpha)
        click.echo(report.to_markdown())
        if out:
            with open(out, "w") as fh:
                fh.write(report.to_csv())
    _runtime(run)


@main.command()
@click.option("--records", "record_paths", type=click.Path(exists=True),
              multiple=True, required=True)
@click.option("--out", type=click.Path(), default=None)
def report(record_paths, out):
    """Render split-metric correlations across runs as CSV."""
    def run():
        records = []
        for path in record_paths:
            with open(path) as fh:
                for line in fh:
                    if line.strip():
                        r = S.RunRecord.from_json(json.loads(line))
                        if r.state == "completed":
                            records.append(r)
        records.sort(key=lambda r: (r.method, r.dataset, r.seed))
        csv = S.correlation_csv(S.subset_correlation(records))
        click.echo(csv)
        if out:
            with open(out, "w") as fh:
                fh.write(csv)
    _runtime(run)


if __name__ == "__main__":
    main()
