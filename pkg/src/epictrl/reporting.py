"""CSV outputs with fixed headers, run manifests and optional charts."""
from __future__ import annotations

import csv
import datetime as _dt
import json
from importlib import metadata
from pathlib import Path

import numpy as np

from epictrl.trainer import percent_change

# file stem -> column names; docs/csv_schemas.md describes each column
SCHEMAS = {
    "rewards": ["episode", "agent", "reward"],
    "diagnostics": ["update", "timesteps", "agent", "mean_ratio", "clip_fraction",
                    "policy_loss", "value_loss", "entropy", "mean_episode_reward"],
    "evaluation": ["episode", "year", "jurisdiction", "incidence", "cost", "budget", "reward"],
    "trajectory": ["episode", "year", "jurisdiction", "risk_group", "new_infections", "cost",
                   "budget", "reward", "a_unaware", "a_art", "a_prep", "saturated_unaware",
                   "saturated_art", "saturated_prep"],
    "summary": ["scope", "first_year_incidence", "last_year_incidence", "percent_change",
                "cumulative_incidence", "cumulative_cost"],
    "compare_incidence": ["scenario", "mode", "seed", "year", "jurisdiction", "incidence",
                          "cost"],
    "compare_difference": ["scenario", "seed", "year", "jurisdiction", "incidence_diff",
                           "cost_diff"],
    "compare_summary": ["scenario", "mode", "seed", "cumulative_incidence", "cumulative_cost",
                        "percent_change"],
    "mixing_incidence": ["seed", "year", "jurisdiction", "scenario", "incidence", "cost"],
    "mixing_difference": ["seed", "year", "jurisdiction", "incidence_diff", "cost_diff"],
}

TOTAL = "TOTAL"


class SchemaError(ValueError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, schema: str, rows) -> Path:
    cols = SCHEMAS[schema]
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            if len(row) != len(cols):
                raise SchemaError(f"{schema}: row has {len(row)} fields, expected {len(cols)}")
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path, schema: str) -> list:
    """Parse ``path`` and check its header and every row width against ``schema``."""
    cols = SCHEMAS[schema]
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != cols:
        raise SchemaError(f"{path}: header {rows[0] if rows else []} != {cols}")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(cols):
            raise SchemaError(f"{path}:{i}: {len(r)} fields, expected {len(cols)}")
    return [dict(zip(cols, r)) for r in rows[1:]]


# -- row builders -----------------------------------------------------------------

def diagnostic_rows(diagnostics) -> list:
    return [(k, x, a, d.mean_ratio, d.clip_fraction, d.policy_loss, d.value_loss, d.entropy,
             d.mean_episode_reward) for k, x, a, d in diagnostics]


def summary_rows(report) -> list:
    inc = report.mean_incidence()
    cost = report.costs.mean(axis=0)
    rows = []
    scopes = [(jid, inc[:, j], cost[:, j]) for j, jid in enumerate(report.jurisdictions)]
    scopes.append((TOTAL, inc.sum(axis=1), cost.sum(axis=1)))
    for scope, series, c in scopes:
        rows.append((scope, series[0], series[-1], percent_change(series[0], series[-1]),
                     series.sum(), c.sum()))
    return rows


def _mean_yearly(report):
    return report.mean_incidence(), report.costs.mean(axis=0)


def compare_rows(cmp) -> tuple:
    """Rows for the incidence, difference and summary comparison files."""
    inc_rows, diff_rows, sum_rows = [], [], []
    for (label, mode, seed), run in sorted(cmp.runs.items()):
        rep = run.report
        inc, cost = _mean_yearly(rep)
        for t, year in enumerate(rep.years):
            for j, jid in enumerate(rep.jurisdictions):
                inc_rows.append((label, mode, seed, year, jid, inc[t, j], cost[t, j]))
        total = inc.sum(axis=1)
        sum_rows.append((label, mode, seed, total.sum(), cost.sum(),
                         percent_change(total[0], total[-1])))
    labels = sorted({k[0] for k in cmp.runs})
    for label in labels:
        for seed in cmp.seeds:
            if (label, "marl", seed) not in cmp.runs or (label, "sarl", seed) not in cmp.runs:
                continue
            m, s = cmp.runs[(label, "marl", seed)].report, cmp.runs[(label, "sarl", seed)].report
            mi, mc = _mean_yearly(m)
            si, sc = _mean_yearly(s)
            for t, year in enumerate(m.years):
                for j, jid in enumerate(m.jurisdictions):
                    diff_rows.append((label, seed, year, jid, mi[t, j] - si[t, j],
                                      mc[t, j] - sc[t, j]))
    return inc_rows, diff_rows, sum_rows


def mixing_rows(study) -> tuple:
    inc_rows, diff_rows = [], []
    for seed in study.seeds:
        pred, real = study.predicted[seed], study.realized[seed]
        pi, pc = _mean_yearly(pred)
        ri, rc = _mean_yearly(real)
        for t, year in enumerate(pred.years):
            for j, jid in enumerate(pred.jurisdictions):
                inc_rows.append((seed, year, jid, "without_mixing", pi[t, j], pc[t, j]))
                inc_rows.append((seed, year, jid, "with_mixing", ri[t, j], rc[t, j]))
                diff_rows.append((seed, year, jid, ri[t, j] - pi[t, j], rc[t, j] - pc[t, j]))
    return inc_rows, diff_rows


# -- manifest -----------------------------------------------------------------------

def code_version() -> str:
    try:
        return metadata.version("epictrl")
    except metadata.PackageNotFoundError:
        return "unknown"


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command: str, config_hash: str, seed, outputs: dict, started: str,
                   extra: dict | None = None) -> Path:
    """Record what ran, with which inputs, and where the results went."""
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "code_version": code_version(),
        "started": started,
        "finished": now(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- charts -------------------------------------------------------------------------

def plot_incidence(rows_by_label: dict, path, title: str = "Annual new infections"):
    """Line chart of yearly totals; ``rows_by_label`` maps label -> (years, values)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, (years, values) in rows_by_label.items():
        ax.plot(years, values, marker="o", label=label)
    ax.set_xlabel("year")
    ax.set_ylabel("new infections")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_rewards(curve_rows, path, window: int = 100):
    """Moving-average episode reward per agent from ``(episode, agent, reward)`` rows."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_agent = {}
    for ep, agent, r in curve_rows:
        by_agent.setdefault(agent, []).append(r)
    fig, ax = plt.subplots(figsize=(7, 4))
    for agent, vals in by_agent.items():
        v = np.asarray(vals, dtype=float)
        w = min(window, len(v))
        ma = np.convolve(v, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w, len(v) + 1), ma, label=agent)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"reward ({window}-episode mean)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
