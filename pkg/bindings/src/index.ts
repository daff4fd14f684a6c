/**
 * Bindings to the vecmap core for matching and evaluation.
 *
 * Nothing is reimplemented here: every call shells out to the core's
 * single-shot JSON interface (`vecmap api <op>`, invoked as
 * `python -m vecmap.cli`). Numbers cross the boundary as shortest round-trip
 * decimal JSON, which both runtimes parse back to the identical IEEE-754
 * double, so results are bit-identical to direct core calls.
 *
 * Set VECMAP_PYTHON to pick the interpreter (default `python3`); the vecmap
 * package must be importable by it.
 */
import { spawnSync } from "node:child_process";

/** Mirrors the core library version. */
export const VERSION = "0.1.0";

export type PolylineKind = "open" | "closed";

/**
 * Contiguous row-major float64 array with an explicit shape. Wraps the
 * caller's buffer without copying; serialization reads it in place.
 */
export class BoundArray {
  readonly data: Float64Array;
  readonly shape: readonly number[];

  constructor(data: Float64Array, shape: readonly number[]) {
    const count = shape.reduce((a, b) => a * b, 1);
    if (shape.some((d) => d < 0 || !Number.isInteger(d))) {
      throw new Error(`invalid shape [${shape.join(", ")}]`);
    }
    if (count !== data.length) {
      throw new Error(
        `shape [${shape.join(", ")}] needs ${count} elements, buffer has ${data.length}`,
      );
    }
    this.data = data;
    this.shape = shape;
  }

  static fromNested(rows: readonly (readonly number[])[]): BoundArray {
    const nRows = rows.length;
    const nCols = nRows > 0 ? rows[0]!.length : 0;
    const data = new Float64Array(nRows * nCols);
    rows.forEach((row, i) => {
      if (row.length !== nCols) {
        throw new Error(`ragged rows: row ${i} has ${row.length} values, expected ${nCols}`);
      }
      data.set(row, i * nCols);
    });
    return new BoundArray(data, [nRows, nCols]);
  }

  /** Materialize as nested rows (for a 2-D array). */
  toNested(): number[][] {
    if (this.shape.length !== 2) {
      throw new Error(`toNested needs a 2-D array, got shape [${this.shape.join(", ")}]`);
    }
    const [nRows, nCols] = this.shape as [number, number];
    const out: number[][] = [];
    for (let i = 0; i < nRows; i++) {
      out.push(Array.from(this.data.subarray(i * nCols, (i + 1) * nCols)));
    }
    return out;
  }
}

export interface LineCostResult {
  cost: number;
  /** Index permutation of the ground-truth points achieving the minimum. */
  permutation: number[];
}

export interface HungarianResult {
  pairs: [number, number][];
  unmatchedPreds: number[];
  totalCost: number;
}

/** Nested report mapping as produced by the core evaluator. */
export interface EvalReport {
  classes: string[];
  thresholds: number[];
  ap: Record<string, Record<string, number | null>>;
  ap_by_class: Record<string, number | null>;
  mAP: number | null;
  counts: Record<string, Record<string, { n_pred: number; n_gt: number; n_tp: number }>>;
}

function pythonInterpreter(): string {
  return process.env.VECMAP_PYTHON ?? "python3";
}

function callCore(op: "line-cost" | "hungarian" | "evaluate", request: unknown): unknown {
  const proc = spawnSync(pythonInterpreter(), ["-m", "vecmap.cli", "api", op], {
    input: JSON.stringify(request),
    encoding: "utf8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.error) {
    throw proc.error;
  }
  if (proc.status !== 0) {
    // surface the core's own error text
    const detail = (proc.stderr ?? "").trim() || `exit code ${proc.status}`;
    throw new Error(`vecmap api ${op} failed: ${detail}`);
  }
  return JSON.parse(proc.stdout);
}

function asRows(array: BoundArray | number[][], expectCols: number | null, name: string): number[][] {
  const bound = array instanceof BoundArray ? array : BoundArray.fromNested(array);
  if (bound.shape.length !== 2 || (expectCols !== null && bound.shape[1] !== expectCols)) {
    throw new Error(
      `${name} must be (n, ${expectCols ?? "m"}), got shape [${bound.shape.join(", ")}]`,
    );
  }
  return bound.toNested();
}

/**
 * Minimal mean smooth-L1 between a predicted and a ground-truth polyline over
 * the ground truth's reparameterization group. Both arrays are (n, 2) in
 * normalized [0, 1]^2 coordinates with the same point count.
 */
export function boundLineCost(
  pred: BoundArray | number[][],
  gt: BoundArray | number[][],
  kind: PolylineKind,
): LineCostResult {
  const request = {
    pred: asRows(pred, 2, "pred"),
    gt: asRows(gt, 2, "gt"),
    kind,
  };
  return callCore("line-cost", request) as LineCostResult;
}

/** Exact minimum-cost assignment on an (R, C) cost matrix (rows = preds). */
export function boundHungarian(costs: BoundArray | number[][]): HungarianResult {
  const rows = asRows(costs, null, "costs");
  const raw = callCore("hungarian", { costs: rows }) as {
    pairs: [number, number][];
    unmatched_preds: number[];
    total_cost: number;
  };
  return { pairs: raw.pairs, unmatchedPreds: raw.unmatched_preds, totalCost: raw.total_cost };
}

/**
 * Chamfer-AP evaluation of two `.vmap.jsonl` files at a range preset
 * (30 or 50 meters; the matching threshold preset applies).
 */
export function boundEvaluate(
  predPath: string,
  gtPath: string,
  rangePreset: 30 | 50 = 50,
): EvalReport {
  return callCore("evaluate", {
    pred_path: predPath,
    gt_path: gtPath,
    range: rangePreset,
  }) as EvalReport;
}
