"""Figure rendering for run and refinement reports.

Every report writes its figure next to the delimited output it illustrates:
a run's energy trace lands beside the diagnostics CSV, a refinement study's
log-log error plot beside the error table.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def energy_figure(records, path, title=None):
    """Total/kinetic/potential traces plus the relative total-energy error."""
    t = np.array([r.time for r in records])
    kin = np.array([r.kinetic for r in records])
    pot = np.array([r.potential for r in records])
    tot = np.array([r.total for r in records])

    fig, (ax, axe) = plt.subplots(
        2, 1, figsize=(7.0, 5.6), sharex=True,
        gridspec_kw={"height_ratios": [2.0, 1.0]})
    ax.plot(t, tot, label="total", color="black", lw=1.4)
    ax.plot(t, kin, label="kinetic", color="tab:red", lw=0.9)
    ax.plot(t, pot, label="potential", color="tab:blue", lw=0.9)
    ax.set_ylabel("energy")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)

    scale = max(abs(tot[0]), 1e-300)
    rel = np.abs(tot - tot[0]) / scale
    # Zeros cannot sit on a log axis; clip to one decade under the floor.
    floor = rel[rel > 0].min() if np.any(rel > 0) else 1e-17
    axe.semilogy(t, np.maximum(rel, 0.1 * floor), color="black", lw=0.9)
    axe.set_xlabel("time")
    axe.set_ylabel("|H - H(0)| / |H(0)|")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def convergence_figure(results, path, title=None):
    """Log-log terminal-error ladder for one or more labelled studies."""
    fig, ax = plt.subplots(figsize=(6.0, 4.6))
    markers = ("o", "s", "^", "d", "v", "*")
    all_taus = []
    for k, (label, res) in enumerate(results.items()):
        ax.loglog(res.taus, res.errors, marker=markers[k % len(markers)],
                  label=f"{label} (slope {res.slope:.2f})")
        all_taus.extend(res.taus)
    if all_taus:
        taus = np.array(sorted(set(all_taus)))
        anchor = max(res.errors.max() for res in results.values())
        for order, style in ((1, ":"), (2, "--")):
            guide = anchor * (taus / taus.max()) ** order
            ax.loglog(taus, guide, style, color="gray", lw=0.8,
                      label=f"order {order}")
    ax.set_xlabel("tau")
    ax.set_ylabel("terminal state error")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def write_error_table(path, results):
    """Delimited companion table: one block of rows per labelled study."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("study,tau,error,slope,protocol\n")
        for label, res in results.items():
            for tau, err in res.rows():
                handle.write(f"{label},{repr(float(tau))},{repr(float(err))},"
                             f"{repr(float(res.slope))},{res.protocol}\n")
    return path
