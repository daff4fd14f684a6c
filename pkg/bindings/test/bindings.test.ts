/**
 * Equality harness: every bound call must be bit-identical to a direct call
 * into the core library. Direct results come from one batched
 * `python -c` invocation per function; bound results go through the public
 * binding (one `vecmap api` subprocess per call, as real hosts would).
 */
import { spawnSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import {
  BoundArray,
  VERSION,
  boundEvaluate,
  boundHungarian,
  boundLineCost,
  type PolylineKind,
} from "../src/index.js";

const PYTHON = process.env.VECMAP_PYTHON ?? "python3";
const N_RANDOM = 100;

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function directCoreBatch(script: string, requests: unknown[]): unknown[] {
  const proc = spawnSync(PYTHON, ["-c", script], {
    input: JSON.stringify(requests),
    encoding: "utf8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (proc.status !== 0) {
    throw new Error(`direct core batch failed: ${proc.stderr}`);
  }
  return JSON.parse(proc.stdout);
}

const LINE_COST_SCRIPT = `
import json, sys
import numpy as np
from vecmap.map_model import Polyline
from vecmap.matching import line_cost
out = []
for req in json.load(sys.stdin):
    cost, perm = line_cost(
        Polyline(np.asarray(req["pred"], dtype=np.float64), req["kind"]),
        Polyline(np.asarray(req["gt"], dtype=np.float64), req["kind"]))
    out.append({"cost": cost, "permutation": [int(i) for i in perm]})
json.dump(out, sys.stdout)
`;

const HUNGARIAN_SCRIPT = `
import json, sys
import numpy as np
from vecmap.matching import hungarian
out = []
for req in json.load(sys.stdin):
    costs = np.asarray(req["costs"], dtype=np.float64)
    a = hungarian(costs)
    total = float(sum(costs[i, j] for i, j in a.pairs))
    out.append({"pairs": [list(p) for p in a.pairs],
                "unmatched_preds": list(a.unmatched_preds),
                "total_cost": total})
json.dump(out, sys.stdout)
`;

const EVALUATE_SCRIPT = `
import json, sys
from dataclasses import replace
from vecmap.cli import nan_to_null
from vecmap.map_model import range_preset, read_vmap
from vecmap.metrics import THRESHOLD_PRESETS, EvalConfig, evaluate
out = []
for req in json.load(sys.stdin):
    r = range_preset(req.get("range", 50))
    cfg = EvalConfig(range=r, thresholds=THRESHOLD_PRESETS[r.x_half])
    clip = lambda maps: [replace(m, range=r).clipped() for m in maps]
    report = evaluate(clip(read_vmap(req["pred_path"])),
                      clip(read_vmap(req["gt_path"])), cfg)
    out.append(nan_to_null(report.to_dict()))
json.dump(out, sys.stdout, allow_nan=False)
`;

function randomPolyline(rand: () => number, nPoints: number): number[][] {
  const pts: number[][] = [];
  for (let i = 0; i < nPoints; i++) {
    pts.push([rand(), rand()]);
  }
  return pts;
}

interface VmapInstance {
  class: string;
  kind: PolylineKind;
  confidence: number;
  points: number[][];
}

function identityPose(): number[] {
  return [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1];
}

function randomVmapPair(rand: () => number, dir: string, tag: string): [string, string] {
  const classes = ["ped_crossing", "divider", "boundary"];
  const frames: { pred: string[]; gt: string[] } = { pred: [], gt: [] };
  for (let f = 0; f < 2; f++) {
    const gtInstances: VmapInstance[] = [];
    const predInstances: VmapInstance[] = [];
    for (const cls of classes) {
      const kind: PolylineKind = cls === "ped_crossing" ? "closed" : "open";
      const nGt = 1 + Math.floor(rand() * 2);
      for (let g = 0; g < nGt; g++) {
        const cx = (rand() - 0.5) * 30;
        const cy = (rand() - 0.5) * 15;
        const nPts = 3 + Math.floor(rand() * 2);
        const pts: number[][] = [];
        for (let i = 0; i < nPts; i++) {
          pts.push([cx + (rand() - 0.5) * 8, cy + (rand() - 0.5) * 8]);
        }
        gtInstances.push({ class: cls, kind, confidence: 1.0, points: pts });
        if (rand() < 0.8) {
          const noisy = pts.map(([x, y]) => [
            x! + (rand() - 0.5) * 2,
            y! + (rand() - 0.5) * 2,
          ]);
          predInstances.push({
            class: cls,
            kind,
            confidence: 0.05 + 0.9 * rand(),
            points: noisy,
          });
        }
      }
    }
    const record = (instances: VmapInstance[]) =>
      JSON.stringify({
        frame_id: `f${f}`,
        timestamp: 0.5 * f,
        ego_pose: identityPose(),
        range: [50, 25],
        instances,
      });
    frames.pred.push(record(predInstances));
    frames.gt.push(record(gtInstances));
  }
  const predPath = join(dir, `${tag}.pred.vmap.jsonl`);
  const gtPath = join(dir, `${tag}.gt.vmap.jsonl`);
  writeFileSync(predPath, frames.pred.join("\n") + "\n");
  writeFileSync(gtPath, frames.gt.join("\n") + "\n");
  return [predPath, gtPath];
}

/** Exhaustive minimum assignment total for small matrices (TS-side oracle). */
function bruteForceAssignment(costs: number[][]): number {
  const r = costs.length;
  const c = costs[0]!.length;
  let best = Infinity;
  const recurse = (row: number, usedCols: Set<number>, picked: number, total: number) => {
    if (picked === Math.min(r, c)) {
      best = Math.min(best, total);
      return;
    }
    if (row >= r || r - row < Math.min(r, c) - picked) {
      return;
    }
    recurse(row + 1, usedCols, picked, total); // skip this row (only if rows > cols)
    for (let j = 0; j < c; j++) {
      if (!usedCols.has(j)) {
        usedCols.add(j);
        recurse(row + 1, usedCols, picked + 1, total + costs[row]![j]!);
        usedCols.delete(j);
      }
    }
  };
  recurse(0, new Set(), 0, 0);
  return best;
}

describe("BoundArray", () => {
  it("wraps buffers without copying and validates shapes", () => {
    const data = new Float64Array([1, 2, 3, 4, 5, 6]);
    const arr = new BoundArray(data, [3, 2]);
    expect(arr.data).toBe(data);
    expect(arr.toNested()).toEqual([
      [1, 2],
      [3, 4],
      [5, 6],
    ]);
    expect(() => new BoundArray(data, [4, 2])).toThrow(/8 elements/);
    expect(() => BoundArray.fromNested([[1, 2], [3]])).toThrow(/ragged/);
  });
});

describe("boundLineCost", () => {
  it("is zero for identical arrays", () => {
    const pts = [
      [0.1, 0.1],
      [0.4, 0.2],
      [0.7, 0.5],
    ];
    const result = boundLineCost(pts, pts, "open");
    expect(result.cost).toBe(0);
    expect(result.permutation).toEqual([0, 1, 2]);
  });

  it("is zero for a reversed open polyline", () => {
    const gt = [
      [0.1, 0.1],
      [0.4, 0.2],
      [0.7, 0.5],
    ];
    const result = boundLineCost([...gt].reverse(), gt, "open");
    expect(result.cost).toBe(0);
    expect(result.permutation).toEqual([2, 1, 0]);
  });

  it("surfaces core errors", () => {
    expect(() =>
      boundLineCost(
        [
          [0, 0],
          [1, 1],
        ],
        [
          [0, 0],
          [0.5, 0.5],
          [1, 1],
        ],
        "open",
      ),
    ).toThrow(/point counts/);
  });

  it(`matches direct core calls bitwise on ${N_RANDOM} random inputs`, () => {
    const rand = mulberry32(1001);
    const requests = [];
    for (let i = 0; i < N_RANDOM; i++) {
      const n = 2 + Math.floor(rand() * 5);
      const kind: PolylineKind = n >= 3 && rand() < 0.5 ? "closed" : "open";
      requests.push({
        pred: randomPolyline(rand, n),
        gt: randomPolyline(rand, n),
        kind,
      });
    }
    const direct = directCoreBatch(LINE_COST_SCRIPT, requests);
    const bound = requests.map((r) =>
      boundLineCost(r.pred, r.gt, r.kind as PolylineKind),
    );
    expect(bound).toStrictEqual(direct);
  });
});

describe("boundHungarian", () => {
  it("picks the diagonal on a diagonal-dominant matrix", () => {
    const costs = [
      [0, 1, 1],
      [1, 0, 1],
      [1, 1, 0],
    ];
    const result = boundHungarian(costs);
    expect(result.pairs).toEqual([
      [0, 0],
      [1, 1],
      [2, 2],
    ]);
    expect(result.totalCost).toBe(0);
  });

  it("handles a 1x1 matrix", () => {
    const result = boundHungarian([[7.5]]);
    expect(result.pairs).toEqual([[0, 0]]);
    expect(result.unmatchedPreds).toEqual([]);
    expect(result.totalCost).toBe(7.5);
  });

  it("matches a TS brute-force oracle on random 6x5 matrices", () => {
    const rand = mulberry32(7);
    for (let trial = 0; trial < 10; trial++) {
      const costs = Array.from({ length: 6 }, () =>
        Array.from({ length: 5 }, () => rand() * 10),
      );
      const result = boundHungarian(costs);
      expect(result.pairs).toHaveLength(5);
      expect(result.unmatchedPreds).toHaveLength(1);
      expect(Math.abs(result.totalCost - bruteForceAssignment(costs))).toBeLessThan(1e-12);
    }
  });

  it(`matches direct core calls bitwise on ${N_RANDOM} random inputs`, () => {
    const rand = mulberry32(2002);
    const requests = [];
    for (let i = 0; i < N_RANDOM; i++) {
      const r = 1 + Math.floor(rand() * 6);
      const c = 1 + Math.floor(rand() * 6);
      requests.push({
        costs: Array.from({ length: r }, () =>
          Array.from({ length: c }, () => rand() * 20 - 5),
        ),
      });
    }
    const direct = directCoreBatch(HUNGARIAN_SCRIPT, requests) as Array<{
      pairs: [number, number][];
      unmatched_preds: number[];
      total_cost: number;
    }>;
    const bound = requests.map((r) => boundHungarian(r.costs));
    expect(bound.map((b) => ({
      pairs: b.pairs,
      unmatched_preds: b.unmatchedPreds,
      total_cost: b.totalCost,
    }))).toStrictEqual(direct);
  });
});

describe("boundEvaluate", () => {
  it("returns mAP 1.0 for ground truth evaluated against itself", () => {
    const dir = mkdtempSync(join(tmpdir(), "vecmap-bindings-"));
    const rand = mulberry32(3003);
    const [, gtPath] = randomVmapPair(rand, dir, "self");
    const report = boundEvaluate(gtPath, gtPath, 50);
    expect(report.mAP).toBe(1.0);
    for (const cls of report.classes) {
      expect(report.ap_by_class[cls]).toBe(1.0);
    }
  });

  it(`matches direct core calls bitwise on ${N_RANDOM} random fixtures`, () => {
    const dir = mkdtempSync(join(tmpdir(), "vecmap-bindings-"));
    const rand = mulberry32(4004);
    const requests = [];
    for (let i = 0; i < N_RANDOM; i++) {
      const [predPath, gtPath] = randomVmapPair(rand, dir, `case${i}`);
      requests.push({ pred_path: predPath, gt_path: gtPath, range: 50 });
    }
    const direct = directCoreBatch(EVALUATE_SCRIPT, requests);
    const bound = requests.map((r) =>
      boundEvaluate(r.pred_path, r.gt_path, r.range as 30 | 50),
    );
    expect(bound).toStrictEqual(direct);
  });
});

describe("version", () => {
  it("mirrors the core library version", () => {
    const proc = spawnSync(PYTHON, ["-c", "import vecmap; print(vecmap.__version__)"], {
      encoding: "utf8",
    });
    expect(proc.status).toBe(0);
    expect(proc.stdout.trim()).toBe(VERSION);
  });
});
