"""Command-line driver: ``clusterda --mode MODE [flags]``.

Modes: ``gen-data``, ``s``, ``s+t``, ``adapt``, ``ablate``, ``eval``, ``report``.
Every flag mirrors a config key (``--k 30 --margin 1.0 --lambda 1.0
--pareto-alpha 1.0 --seed 7 --data d.csv --out runs/x``); ``--config FILE``
reads a flat YAML file first and flags override it. Outputs go under
``--out`` only. Exit status: 0 success, 1 usage or config error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import nnkit
from .adapt import RunHistory, adapt, evaluate_model, pretrain_source, train_s_plus_t
from .config import ALIASES, MODES, ConfigError, RunConfig, _FIELDS, load_config
from .data import NO_LABEL, Dataset, Domain, Split, generate_synthetic, load_dataset, save_dataset, split_target
from .metrics import MetricReport

log = logging.getLogger("clusterda")

ABLATION_TAGS = {"km": "KM", "soft": "SoftConst", "full": "Full"}
# (better, baseline) pairs scored in report mode when both are present
COMPARISONS = [("adapt", "s+t"), ("s+t", "s"), ("adapt", "s"), ("Full", "SoftConst"), ("SoftConst", "KM"),
               ("Full", "KM")]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clusterda", description="Cluster-guided semi-supervised domain adaptation experiments.",
                allow_abbrev=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="flat YAML file of config keys; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    flag_aliases = {v: k for k, v in ALIASES.items() if k.islower()}
    for name, f in _FIELDS.items():
        flags = [f"--{name.replace('_', '-')}"]
        if name in flag_aliases:
            flags.append(f"--{flag_aliases[name].replace('_', '-')}")
        default = f.default
        kw = {"dest": name}
        if name == "mode":
            kw["choices"] = MODES
        elif name in ("hidden", "runs"):
            kw.update(nargs="+", type=int if name == "hidden" else str)
        elif isinstance(default, int):
            kw["type"] = int
        elif isinstance(default, float):
            kw["type"] = float
        p.add_argument(*flags, help=f"default: {default}", **kw)
    return p


def parse_config(argv) -> tuple[RunConfig, bool]:
    ns = vars(build_parser().parse_args(argv))
    path = ns.pop("config", None)
    verbose = ns.pop("verbose", False)
    return load_config(path, ns), verbose


# --------------------------------------------------------------------------- output helpers


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.echo(), "seed": cfg.seed}


def _pretrain_csv(curve) -> str:
    lines = ["round,loss_ce,loss_triplet,val_mdice,k,purity"]
    lines += [f"{i},{v!r},,,," for i, v in enumerate(curve, start=1)]
    return "\n".join(lines) + "\n"


def _plot_curves(path: Path, histories: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for name, h in histories.items():
        if h.pretrain_curve:
            axes[0].plot(range(1, len(h.pretrain_curve) + 1), h.pretrain_curve, label=name)
        if h.records:
            r = [rec.round for rec in h.records]
            axes[1].plot(r, [rec.loss_ce for rec in h.records], label=f"{name} CE")
            if any(rec.loss_triplet is not None for rec in h.records):
                axes[1].plot(r, [np.nan if rec.loss_triplet is None else rec.loss_triplet for rec in h.records],
                             "--", label=f"{name} triplet")
            axes[2].plot(r, [rec.val_mdice for rec in h.records], marker="o", ms=3, label=name)
    axes[0].set(title="source pretraining", xlabel="epoch", ylabel="CE loss")
    axes[1].set(title="training losses", xlabel="round")
    axes[2].set(title="validation mDice", xlabel="round")
    for ax in axes:
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_bars(path: Path, names, mdice, midice, mdice_err=None, midice_err=None, title="") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.4))
    ax.bar(x - 0.2, mdice, 0.4, yerr=mdice_err, capsize=3, label="mDice")
    ax.bar(x + 0.2, midice, 0.4, yerr=midice_err, capsize=3, label="MiDice")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# --------------------------------------------------------------------------- data and models


def _synthesize(cfg: RunConfig) -> Dataset:
    return split_target(generate_synthetic(cfg.synth()), cfg.labeled_fraction, cfg.seed)


def obtain_dataset(cfg: RunConfig, out: Path) -> Dataset:
    """Load ``--data`` or synthesize. Target-train labels that are all visible get split."""
    if cfg.data is None:
        ds = _synthesize(cfg)
        save_dataset(ds, out / "dataset.csv")
        return ds
    ds = load_dataset(cfg.data)
    tgt = ds.mask(Domain.TARGET, Split.TRAIN)
    if np.any(tgt) and not np.any(ds.label[tgt] == NO_LABEL):
        log.info("no unlabeled target-train samples in %s; keeping %.3g labeled", cfg.data, cfg.labeled_fraction)
        ds = split_target(ds, cfg.labeled_fraction, cfg.seed)
    return ds


def _pretrained(cfg: RunConfig, ds: Dataset):
    tc = cfg.train()
    model = nnkit.init_model(ds.dim, ds.num_classes, tc.hidden, tc.embed_dim, cfg.seed)
    return pretrain_source(model, ds, tc)


def _metrics_payload(cfg: RunConfig, method: str, model, ds: Dataset) -> dict:
    payload = {"method": method, **_provenance(cfg)}
    payload["target_test"] = evaluate_model(model, ds, Domain.TARGET, Split.TEST).to_dict()
    if np.any(ds.mask(Domain.SOURCE, Split.TEST)):
        payload["source_test"] = evaluate_model(model, ds, Domain.SOURCE, Split.TEST).to_dict()
    return payload


def _history_payload(cfg: RunConfig, history: RunHistory) -> dict:
    return {**history.to_dict(), **_provenance(cfg)}


def _save_partial(exc: BaseException, cfg: RunConfig, out: Path) -> None:
    history = getattr(exc, "history", None)
    if isinstance(history, RunHistory):
        write_json(out / "history.json", {**_history_payload(cfg, history), "failed": str(exc)})


# --------------------------------------------------------------------------- modes


def run_gen_data(cfg: RunConfig, out: Path) -> None:
    ds = _synthesize(cfg)
    save_dataset(ds, out / "dataset.csv")
    write_json(out / "config.json", _provenance(cfg))
    log.info("wrote %d samples to %s", len(ds), out / "dataset.csv")


def run_train(cfg: RunConfig, out: Path) -> None:
    ds = obtain_dataset(cfg, out)
    model, curve = _pretrained(cfg, ds)
    if cfg.mode == "s":
        history = RunHistory("s", pretrain_curve=curve)
        csv_text = _pretrain_csv(curve)
    else:
        trainer = train_s_plus_t if cfg.mode == "s+t" else adapt
        try:
            model, history = trainer(model, ds, cfg.adapt())
        except Exception as exc:
            _save_partial(exc, cfg, out)
            raise
        history.pretrain_curve = curve
        csv_text = history.to_csv()
    nnkit.save_checkpoint(model, out / "model.ckpt", {"method": cfg.mode, **_provenance(cfg)})
    write_json(out / "history.json", _history_payload(cfg, history))
    (out / "history.csv").write_text(csv_text, encoding="utf-8")
    metrics = _metrics_payload(cfg, cfg.mode, model, ds)
    write_json(out / "metrics.json", metrics)
    report = MetricReport.from_dict(metrics["target_test"])
    text = report.table(f"{cfg.mode} seed {cfg.seed}: target test")
    if history.records:
        text += f"\nrounds run {history.stop_round}, best round {history.best_round} ({history.validation} validation)"
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    _plot_curves(figs / "learning_curves.png", {cfg.mode: history})
    print(text)


def run_ablate(cfg: RunConfig, out: Path) -> None:
    ds = obtain_dataset(cfg, out)
    pretrained, curve = _pretrained(cfg, ds)
    reports, histories = {}, {}
    for stage, tag in ABLATION_TAGS.items():
        try:
            model, history = adapt(pretrained, ds, cfg.adapt(stage))
        except Exception as exc:
            _save_partial(exc, cfg, out)
            raise
        history.pretrain_curve = curve
        rep = evaluate_model(model, ds, Domain.TARGET, Split.TEST)
        best = next((r for r in history.records if r.round == history.best_round), None)
        rep.purity = None if best is None else best.purity
        reports[tag] = rep.to_dict()
        reports[tag]["minority_purity"] = None if best is None else best.minority_purity
        histories[tag] = history
        (out / f"history_{tag.lower()}.csv").write_text(history.to_csv(), encoding="utf-8")
    write_json(out / "history.json", {"method": "ablate", **_provenance(cfg),
                                      "runs": {t: h.to_dict() for t, h in histories.items()}})
    write_json(out / "metrics.json", {"method": "ablate", **_provenance(cfg), "reports": reports})
    text = "\n\n".join(MetricReport.from_dict(r).table(f"{t} seed {cfg.seed}: target test")
                       for t, r in reports.items())
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    _plot_curves(figs / "learning_curves.png", histories)
    _plot_bars(figs / "ablation.png", list(reports), [r["mdice"] for r in reports.values()],
               [r["midice"] for r in reports.values()], title=f"ablation, seed {cfg.seed}")
    print(text)


def run_eval(cfg: RunConfig, out: Path) -> None:
    ds = load_dataset(cfg.data)
    model = nnkit.load_checkpoint(cfg.checkpoint, expect_input_dim=ds.dim, expect_classes=ds.num_classes)
    metrics = _metrics_payload(cfg, "eval", model, ds)
    write_json(out / "metrics.json", metrics)
    text = MetricReport.from_dict(metrics["target_test"]).table(f"eval {cfg.checkpoint}: target test")
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def _collect_runs(paths) -> list[dict]:
    """Flatten metrics.json files (or run directories holding one) into per-method entries."""
    entries = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            path = path / "metrics.json"
        try:
            m = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RuntimeError(f"{path}: cannot read run metrics ({exc})") from None
        key = (m.get("seed"), json.dumps(m.get("config", {}).get("data")))
        if m.get("method") == "ablate":
            for tag, rep in m["reports"].items():
                entries.append({"method": tag, "pair_key": key, "mdice": rep["mdice"], "midice": rep["midice"]})
        elif "target_test" in m:
            entries.append({"method": m["method"], "pair_key": key,
                            "mdice": m["target_test"]["mdice"], "midice": m["target_test"]["midice"]})
        else:
            raise RuntimeError(f"{path}: not a run metrics file")
    return entries


def _stats(values) -> tuple[float, float]:
    v = np.asarray([np.nan if x is None else x for x in values], dtype=np.float64)
    std = float(np.nanstd(v, ddof=1)) if np.sum(~np.isnan(v)) > 1 else 0.0
    return float(np.nanmean(v)), std


def aggregate(entries: list[dict]) -> dict:
    order = []
    for e in entries:
        if e["method"] not in order:
            order.append(e["method"])
    methods = {}
    for name in order:
        sel = [e for e in entries if e["method"] == name]
        md, md_sd = _stats([e["mdice"] for e in sel])
        mi, mi_sd = _stats([e["midice"] for e in sel])
        methods[name] = {"n": len(sel), "mdice_mean": md, "mdice_std": md_sd, "midice_mean": mi, "midice_std": mi_sd}
    wins = []
    for better, base in COMPARISONS:
        if better in methods and base in methods:
            a = {e["pair_key"]: e["mdice"] for e in entries if e["method"] == better}
            b = {e["pair_key"]: e["mdice"] for e in entries if e["method"] == base}
            shared = [k for k in a if k in b]
            wins.append({"method": better, "baseline": base, "pairs": len(shared),
                         "wins": sum(a[k] > b[k] for k in shared),
                         "mean_gain": float(np.mean([a[k] - b[k] for k in shared])) if shared else None})
    return {"methods": methods, "wins": wins}


def format_report(agg: dict) -> str:
    rows = [("method", "n", "mDice", "MiDice")]
    for name, s in agg["methods"].items():
        rows.append((name, str(s["n"]), f"{s['mdice_mean']:.4f} ± {s['mdice_std']:.4f}",
                     f"{s['midice_mean']:.4f} ± {s['midice_std']:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.append("(mean ± sample std over runs, target test)")
    for w in agg["wins"]:
        gain = "n/a" if w["mean_gain"] is None else f"{w['mean_gain']:+.4f}"
        lines.append(f"{w['method']} beats {w['baseline']} in {w['wins']}/{w['pairs']} paired runs "
                     f"(mean mDice gain {gain})")
    return "\n".join(lines)


def run_report(cfg: RunConfig, out: Path) -> None:
    agg = aggregate(_collect_runs(cfg.runs))
    write_json(out / "metrics.json", {"method": "report", **_provenance(cfg), **agg})
    text = format_report(agg)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    names = list(agg["methods"])
    s = agg["methods"]
    _plot_bars(figs / "report.png", names, [s[n]["mdice_mean"] for n in names],
               [s[n]["midice_mean"] for n in names], [s[n]["mdice_std"] for n in names],
               [s[n]["midice_std"] for n in names], title="target test, mean ± std")
    print(text)


RUNNERS = {"gen-data": run_gen_data, "s": run_train, "s+t": run_train, "adapt": run_train,
           "ablate": run_ablate, "eval": run_eval, "report": run_report}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg, verbose = parse_config(argv)
    except (UsageError, ConfigError) as exc:
        for line in str(exc).splitlines():
            print(f"clusterda: error: {line}", file=sys.stderr)
        print("clusterda: see --help for the available flags", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"clusterda: error: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return 1
    try:
        RUNNERS[cfg.mode](cfg, out)
    except Exception as exc:  # every runtime failure maps to exit status 2 with its message
        print(f"clusterda: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
