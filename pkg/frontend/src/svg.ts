// Minimal deterministic SVG scene builder: enough for log/linear axes,
// point series with error bars, bars and reference lines. No DOM, no
// canvas; figures are plain XML written to disk.

export interface Extent {
    min: number;
    max: number;
}

export interface Scale {
    toPx(v: number): number;
    ticks(): number[];
}

export function linearScale(ext: Extent, pxMin: number, pxMax: number): Scale {
    const span = ext.max - ext.min || 1;
    return {
        toPx: (v) => pxMin + ((v - ext.min) / span) * (pxMax - pxMin),
        ticks: () => {
            const step = niceStep(span / 5);
            const start = Math.ceil(ext.min / step) * step;
            const out: number[] = [];
            for (let v = start; v <= ext.max + 1e-12 * Math.abs(span); v += step) {
                out.push(Number(v.toPrecision(12)));
            }
            return out;
        },
    };
}

export function logScale(ext: Extent, pxMin: number, pxMax: number): Scale {
    const lo = Math.log10(ext.min);
    const hi = Math.log10(ext.max);
    const span = hi - lo || 1;
    return {
        toPx: (v) => pxMin + ((Math.log10(v) - lo) / span) * (pxMax - pxMin),
        ticks: () => {
            const out: number[] = [];
            for (let d = Math.ceil(lo - 1e-9); d <= Math.floor(hi + 1e-9); d += 1) {
                out.push(10 ** d);
            }
            if (out.length < 2) out.push(ext.min, ext.max);
            return out;
        },
    };
}

function niceStep(raw: number): number {
    const mag = 10 ** Math.floor(Math.log10(Math.abs(raw) || 1));
    const r = raw / mag;
    if (r < 1.5) return mag;
    if (r < 3.5) return 2 * mag;
    if (r < 7.5) return 5 * mag;
    return 10 * mag;
}

export function fmt(v: number): string {
    if (v === 0) return "0";
    const a = Math.abs(v);
    if (a >= 0.01 && a < 10000) return String(Number(v.toPrecision(6)));
    return v.toExponential(1);
}

const esc = (s: string) =>
    s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;").replace(/"/g, "&quot;");

export class Figure {
    readonly width = 720;
    readonly height = 480;
    readonly margin = { left: 70, right: 20, top: 40, bottom: 55 };
    private parts: string[] = [];

    get plotLeft() { return this.margin.left; }
    get plotRight() { return this.width - this.margin.right; }
    get plotTop() { return this.margin.top; }
    get plotBottom() { return this.height - this.margin.bottom; }

    add(fragment: string): void {
        this.parts.push(fragment);
    }

    line(x1: number, y1: number, x2: number, y2: number, stroke: string, extra = ""): void {
        this.add(
            `<line x1="${r(x1)}" y1="${r(y1)}" x2="${r(x2)}" y2="${r(y2)}" stroke="${stroke}" ${extra}/>`,
        );
    }

    circle(x: number, y: number, radius: number, fill: string): void {
        this.add(`<circle cx="${r(x)}" cy="${r(y)}" r="${radius}" fill="${fill}"/>`);
    }

    rect(x: number, y: number, w: number, h: number, fill: string): void {
        this.add(`<rect x="${r(x)}" y="${r(y)}" width="${r(w)}" height="${r(h)}" fill="${fill}"/>`);
    }

    text(x: number, y: number, content: string, extra = ""): void {
        const size = extra.includes("font-size") ? "" : 'font-size="12" ';
        this.add(
            `<text x="${r(x)}" y="${r(y)}" font-family="sans-serif" ${size}${extra}>${esc(content)}</text>`,
        );
    }

    xAxis(scale: Scale, label: string): void {
        const y = this.plotBottom;
        this.line(this.plotLeft, y, this.plotRight, y, "#222");
        for (const t of scale.ticks()) {
            const x = scale.toPx(t);
            if (x < this.plotLeft - 1 || x > this.plotRight + 1) continue;
            this.line(x, y, x, y + 5, "#222");
            this.text(x, y + 20, fmt(t), 'text-anchor="middle"');
        }
        this.text((this.plotLeft + this.plotRight) / 2, this.height - 12, label,
            'text-anchor="middle" font-style="italic"');
    }

    yAxis(scale: Scale, label: string): void {
        const x = this.plotLeft;
        this.line(x, this.plotTop, x, this.plotBottom, "#222");
        for (const t of scale.ticks()) {
            const y = scale.toPx(t);
            if (y < this.plotTop - 1 || y > this.plotBottom + 1) continue;
            this.line(x - 5, y, x, y, "#222");
            this.text(x - 8, y + 4, fmt(t), 'text-anchor="end"');
        }
        this.text(16, (this.plotTop + this.plotBottom) / 2, label,
            `text-anchor="middle" font-style="italic" transform="rotate(-90 16 ${r((this.plotTop + this.plotBottom) / 2)})"`);
    }

    title(content: string): void {
        this.text(this.width / 2, 22, content, 'text-anchor="middle" font-size="15" font-weight="bold"');
    }

    errorBar(x: number, yLo: number, yHi: number, stroke: string): void {
        this.line(x, yLo, x, yHi, stroke);
        this.line(x - 4, yLo, x + 4, yLo, stroke);
        this.line(x - 4, yHi, x + 4, yHi, stroke);
    }

    referenceLine(y: number, stroke: string, label: string): void {
        this.line(this.plotLeft, y, this.plotRight, y, stroke,
            'stroke-dasharray="6 4" data-role="reference-line"');
        this.text(this.plotRight - 4, y - 6, label, `text-anchor="end" fill="${stroke}"`);
    }

    render(): string {
        return [
            `<svg xmlns="http://www.w3.org/2000/svg" width="${this.width}" height="${this.height}" viewBox="0 0 ${this.width} ${this.height}">`,
            `<rect width="${this.width}" height="${this.height}" fill="white"/>`,
            ...this.parts,
            "</svg>",
        ].join("\n");
    }
}

const r = (v: number) => Number(v.toFixed(2));

export function padded(values: number[], frac = 0.1): Extent {
    let min = Math.min(...values);
    let max = Math.max(...values);
    if (min === max) {
        min -= Math.abs(min) * 0.5 + 1e-6;
        max += Math.abs(max) * 0.5 + 1e-6;
    }
    const pad = (max - min) * frac;
    return { min: min - pad, max: max + pad };
}
