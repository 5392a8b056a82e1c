// CSV parsing against the documented column schemas of the simulation
// toolkit. Columns are fixed and named; a missing column is a hard error
// so silent drift between producer and plots is impossible.

export class SchemaMismatch extends Error {
    constructor(message: string) {
        super(message);
        this.name = "SchemaMismatch";
    }
}

export const CONVERGE_COLUMNS = [
    "epsilon", "functional", "estimate", "std_error", "n_paths",
    "ks_stat", "ks_time", "wall_ms",
] as const;

export const PRICE_COLUMNS = [
    "epsilon", "price", "std_error", "n_paths", "gap_vs_limit", "wall_ms",
] as const;

export interface ConvergeRow {
    epsilon: number;
    functional: string;
    estimate: number;
    std_error: number;
    n_paths: number;
    ks_stat: number;
    ks_time: number;
    wall_ms: number;
}

export interface PriceRow {
    epsilon: number;
    price: number;
    std_error: number;
    n_paths: number;
    gap_vs_limit: number;
    wall_ms: number;
}

function parseTable(text: string, required: readonly string[], path: string) {
    const lines = text.split(/\r?\n/).filter((l) => l.trim().length > 0);
    if (lines.length < 2) {
        throw new SchemaMismatch(`${path}: expected a header plus data rows`);
    }
    const header = lines[0].split(",").map((c) => c.trim());
    for (const col of required) {
        if (!header.includes(col)) {
            throw new SchemaMismatch(`${path}: missing column '${col}'`);
        }
    }
    const index = new Map(header.map((c, i) => [c, i]));
    return lines.slice(1).map((line, rowIdx) => {
        const cells = line.split(",");
        if (cells.length !== header.length) {
            throw new SchemaMismatch(
                `${path}: row ${rowIdx + 1} has ${cells.length} cells, header has ${header.length}`,
            );
        }
        const cell = (name: string) => cells[index.get(name)!];
        return { cell };
    });
}

function num(raw: string, column: string, path: string): number {
    const v = Number(raw);
    if (!Number.isFinite(v)) {
        throw new SchemaMismatch(`${path}: non-numeric value '${raw}' in column '${column}'`);
    }
    return v;
}

export function parseConvergeCsv(text: string, path = "converge.csv"): ConvergeRow[] {
    return parseTable(text, CONVERGE_COLUMNS, path).map(({ cell }) => ({
        epsilon: num(cell("epsilon"), "epsilon", path),
        functional: cell("functional"),
        estimate: num(cell("estimate"), "estimate", path),
        std_error: num(cell("std_error"), "std_error", path),
        n_paths: num(cell("n_paths"), "n_paths", path),
        ks_stat: num(cell("ks_stat"), "ks_stat", path),
        ks_time: num(cell("ks_time"), "ks_time", path),
        wall_ms: num(cell("wall_ms"), "wall_ms", path),
    }));
}

export function parsePriceCsv(text: string, path = "price.csv"): PriceRow[] {
    return parseTable(text, PRICE_COLUMNS, path).map(({ cell }) => ({
        epsilon: num(cell("epsilon"), "epsilon", path),
        price: num(cell("price"), "price", path),
        std_error: num(cell("std_error"), "std_error", path),
        n_paths: num(cell("n_paths"), "n_paths", path),
        gap_vs_limit: num(cell("gap_vs_limit"), "gap_vs_limit", path),
        wall_ms: num(cell("wall_ms"), "wall_ms", path),
    }));
}
