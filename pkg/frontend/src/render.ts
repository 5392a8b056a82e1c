// Figure assembly for the three plot kinds. Input CSVs follow the
// schemas published by the simulation toolkit; the epsilon = 0 row is
// the averaged-limit cell.

import * as fs from "node:fs";
import * as path from "node:path";

import {
    ConvergeRow,
    PriceRow,
    SchemaMismatch,
    parseConvergeCsv,
    parsePriceCsv,
} from "./schema.js";
import { Figure, fmt, linearScale, logScale, padded } from "./svg.js";

export type PlotKind = "gap-vs-epsilon" | "ks-vs-epsilon" | "price-gap";

export interface PlotJob {
    inputs: string[];
    output: string;
    kind: PlotKind;
}

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

function readRows<T>(inputs: string[], parse: (text: string, path: string) => T[]): T[] {
    if (inputs.length === 0) throw new SchemaMismatch("no input CSV given");
    return inputs.flatMap((p) => {
        if (!fs.existsSync(p)) throw new SchemaMismatch(`input not found: ${p}`);
        return parse(fs.readFileSync(p, "utf-8"), p);
    });
}

function sweepCells(rows: ConvergeRow[]): ConvergeRow[] {
    return rows.filter((row) => row.epsilon > 0);
}

function limitCell(rows: ConvergeRow[], functional: string): ConvergeRow {
    const limit = rows.find((row) => row.epsilon === 0 && row.functional === functional);
    if (!limit) {
        throw new SchemaMismatch(`no epsilon=0 limit row for functional '${functional}'`);
    }
    return limit;
}

export function renderGapVsEpsilon(rows: ConvergeRow[]): string {
    const fig = new Figure();
    fig.title("Weak-convergence gap vs timescale ratio");
    const cells = sweepCells(rows);
    if (cells.length === 0) throw new SchemaMismatch("no sweep rows (epsilon > 0)");
    const functionals = [...new Set(cells.map((c) => c.functional))];

    interface Pt { eps: number; gap: number; se: number; }
    const series = functionals.map((fn) => {
        const limit = limitCell(rows, fn);
        const pts: Pt[] = cells
            .filter((c) => c.functional === fn)
            .map((c) => ({
                eps: c.epsilon,
                gap: Math.abs(c.estimate - limit.estimate),
                se: Math.hypot(c.std_error, limit.std_error),
            }))
            .sort((a, b) => a.eps - b.eps);
        return { fn, pts };
    });

    const allEps = series.flatMap((s) => s.pts.map((p) => p.eps));
    const floor = 1e-6;
    const allGap = series.flatMap((s) => s.pts.flatMap((p) => [
        Math.max(p.gap, floor), Math.max(p.gap + p.se, floor),
    ]));
    const xs = logScale({ min: Math.min(...allEps) / 1.3, max: Math.max(...allEps) * 1.3 },
        fig.plotLeft, fig.plotRight);
    const ys = logScale({ min: Math.min(...allGap) / 2, max: Math.max(...allGap) * 2 },
        fig.plotBottom, fig.plotTop);
    fig.xAxis(xs, "epsilon (log)");
    fig.yAxis(ys, "|E phi(X_eps) - E phi(X_limit)| (log)");

    series.forEach(({ fn, pts }, i) => {
        const color = PALETTE[i % PALETTE.length];
        for (let k = 1; k < pts.length; k++) {
            fig.line(xs.toPx(pts[k - 1].eps), ys.toPx(Math.max(pts[k - 1].gap, floor)),
                xs.toPx(pts[k].eps), ys.toPx(Math.max(pts[k].gap, floor)), color,
                'stroke-width="1.5"');
        }
        for (const p of pts) {
            const x = xs.toPx(p.eps);
            fig.circle(x, ys.toPx(Math.max(p.gap, floor)), 3.5, color);
            fig.errorBar(x, ys.toPx(Math.max(p.gap - p.se, floor)),
                ys.toPx(Math.max(p.gap + p.se, floor)), color);
        }
        fig.text(fig.plotLeft + 10, fig.plotTop + 16 * (i + 1), fn, `fill="${color}"`);
    });
    return fig.render();
}

export function renderKsVsEpsilon(rows: ConvergeRow[]): string {
    const fig = new Figure();
    fig.title("Terminal-law KS statistic vs timescale ratio");
    const cells = sweepCells(rows);
    if (cells.length === 0) throw new SchemaMismatch("no sweep rows (epsilon > 0)");
    // one KS statistic per epsilon cell (shared across functionals)
    const byEps = new Map<number, ConvergeRow>();
    for (const c of cells) {
        if (!byEps.has(c.epsilon)) byEps.set(c.epsilon, c);
    }
    const pts = [...byEps.values()].sort((a, b) => a.epsilon - b.epsilon);
    const xs = logScale({
        min: Math.min(...pts.map((p) => p.epsilon)) / 1.3,
        max: Math.max(...pts.map((p) => p.epsilon)) * 1.3,
    }, fig.plotLeft, fig.plotRight);
    const ys = linearScale(padded([0, ...pts.map((p) => p.ks_stat)]),
        fig.plotBottom, fig.plotTop);
    fig.xAxis(xs, "epsilon (log)");
    fig.yAxis(ys, "two-sample KS statistic");
    const n = pts[0].n_paths;
    const crit = 1.628 * Math.sqrt(2 / n);
    if (crit <= Math.max(...pts.map((p) => p.ks_stat)) * 1.4) {
        fig.referenceLine(ys.toPx(crit), "#888", `1% critical value (n=${n})`);
    }
    const color = PALETTE[0];
    for (let k = 1; k < pts.length; k++) {
        fig.line(xs.toPx(pts[k - 1].epsilon), ys.toPx(pts[k - 1].ks_stat),
            xs.toPx(pts[k].epsilon), ys.toPx(pts[k].ks_stat), color, 'stroke-width="1.5"');
    }
    for (const p of pts) {
        fig.circle(xs.toPx(p.epsilon), ys.toPx(p.ks_stat), 3.5, color);
        fig.text(xs.toPx(p.epsilon), ys.toPx(p.ks_stat) - 10, `t=${fmt(p.ks_time)}`,
            'text-anchor="middle" font-size="10"');
    }
    return fig.render();
}

export function renderPriceGap(rows: PriceRow[]): string {
    const fig = new Figure();
    fig.title("Option price vs timescale ratio");
    const cells = rows.filter((row) => row.epsilon > 0).sort((a, b) => b.epsilon - a.epsilon);
    const limit = rows.find((row) => row.epsilon === 0);
    if (cells.length === 0) throw new SchemaMismatch("no sweep rows (epsilon > 0)");
    if (!limit) throw new SchemaMismatch("no epsilon=0 limit row");

    const lo = Math.min(...cells.map((c) => c.price - 4 * c.std_error), limit.price);
    const hi = Math.max(...cells.map((c) => c.price + 4 * c.std_error), limit.price);
    const ys = linearScale(padded([lo, hi], 0.15), fig.plotBottom, fig.plotTop);
    const slot = (fig.plotRight - fig.plotLeft) / cells.length;
    fig.yAxis(ys, "discounted expected payoff");
    fig.line(fig.plotLeft, fig.plotBottom, fig.plotRight, fig.plotBottom, "#222");
    fig.text((fig.plotLeft + fig.plotRight) / 2, fig.height - 12, "epsilon",
        'text-anchor="middle" font-style="italic"');

    cells.forEach((c, i) => {
        const cx = fig.plotLeft + slot * (i + 0.5);
        const w = slot * 0.5;
        const y = ys.toPx(c.price);
        const y0 = ys.toPx(lo);
        fig.rect(cx - w / 2, Math.min(y, y0), w, Math.abs(y0 - y), PALETTE[0]);
        fig.errorBar(cx, ys.toPx(c.price - c.std_error), ys.toPx(c.price + c.std_error), "#222");
        fig.text(cx, fig.plotBottom + 20, fmt(c.epsilon), 'text-anchor="middle"');
        fig.text(cx, y - 8, `gap ${fmt(c.gap_vs_limit)}`, 'text-anchor="middle" font-size="10"');
    });
    fig.referenceLine(ys.toPx(limit.price), "#d62728", `limit ${fmt(limit.price)}`);
    return fig.render();
}

export function render(job: PlotJob): string {
    let svg: string;
    if (job.kind === "gap-vs-epsilon") {
        svg = renderGapVsEpsilon(readRows(job.inputs, parseConvergeCsv));
    } else if (job.kind === "ks-vs-epsilon") {
        svg = renderKsVsEpsilon(readRows(job.inputs, parseConvergeCsv));
    } else if (job.kind === "price-gap") {
        svg = renderPriceGap(readRows(job.inputs, parsePriceCsv));
    } else {
        throw new SchemaMismatch(`unknown plot kind '${job.kind}'`);
    }
    fs.mkdirSync(path.dirname(path.resolve(job.output)), { recursive: true });
    fs.writeFileSync(job.output, svg + "\n");
    return svg;
}
