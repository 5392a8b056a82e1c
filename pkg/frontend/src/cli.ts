// Batch figure renderer:
//   node dist/cli.js --in converge.csv [--in more.csv] --out fig.svg --kind gap-vs-epsilon

import { PlotJob, PlotKind, render } from "./render.js";
import { SchemaMismatch } from "./schema.js";

const KINDS: PlotKind[] = ["gap-vs-epsilon", "ks-vs-epsilon", "price-gap"];

export function parseArgs(argv: string[]): PlotJob {
    const inputs: string[] = [];
    let output = "";
    let kind = "";
    for (let i = 0; i < argv.length; i++) {
        const arg = argv[i];
        const next = () => {
            i += 1;
            if (i >= argv.length) throw new Error(`${arg} expects a value`);
            return argv[i];
        };
        if (arg === "--in") inputs.push(next());
        else if (arg === "--out") output = next();
        else if (arg === "--kind") kind = next();
        else throw new Error(`unknown argument '${arg}'`);
    }
    if (inputs.length === 0 || !output || !kind) {
        throw new Error("usage: --in <csv> [--in <csv>] --out <svg> --kind <kind>");
    }
    if (!KINDS.includes(kind as PlotKind)) {
        throw new Error(`--kind must be one of ${KINDS.join(", ")}`);
    }
    return { inputs, output, kind: kind as PlotKind };
}

export function main(argv: string[]): number {
    try {
        const job = parseArgs(argv);
        render(job);
        console.log(`wrote ${job.output}`);
        return 0;
    } catch (err) {
        if (err instanceof SchemaMismatch) {
            console.error(`schema mismatch: ${err.message}`);
            return 2;
        }
        console.error(String(err instanceof Error ? err.message : err));
        return 1;
    }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
    process.exit(main(process.argv.slice(2)));
}
