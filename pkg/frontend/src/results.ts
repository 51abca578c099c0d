/**
 * The client-side result buffer: rows keyed by seq, strictly increasing with
 * no gaps, fed by cursor polling. Appending is idempotent for any polling
 * schedule — overlapping or repeated batches never duplicate a row.
 */

import type { ResultRow } from "./api.js";

export type Scalar = string | number | boolean | null;

export class ResultBuffer {
  rows: ResultRow[] = [];
  lastSeq = 0;

  /** Append a polled batch; returns how many rows were genuinely new. */
  append(batch: ResultRow[]): number {
    const incoming = [...batch].sort((a, b) => a.seq - b.seq);
    let added = 0;
    for (const row of incoming) {
      if (row.seq <= this.lastSeq) continue; // stale or duplicated delivery
      if (row.seq !== this.lastSeq + 1) break; // refuse to open a gap
      this.rows.push(row);
      this.lastSeq = row.seq;
      added += 1;
    }
    return added;
  }

  /** Payloads parsed as flat scalar objects; null where a payload is not one. */
  parsed(): (Record<string, Scalar> | null)[] {
    return this.rows.map((row) => {
      try {
        const value = JSON.parse(row.payload);
        if (value === null || typeof value !== "object" || Array.isArray(value)) {
          return null;
        }
        for (const v of Object.values(value)) {
          if (v !== null && typeof v === "object") return null;
        }
        return value as Record<string, Scalar>;
      } catch {
        return null;
      }
    });
  }

  /** The measurement stream: PARTIAL rows drive the table and the plot;
   * the FINAL summary renders separately. */
  measurements(): ResultRow[] {
    return this.rows.filter((row) => row.kind === "PARTIAL");
  }

  /** Union of measurement payload keys in first-appearance order. */
  columns(): string[] {
    const columns: string[] = [];
    const parsed = this.parsed();
    this.rows.forEach((row, i) => {
      const obj = parsed[i];
      if (row.kind !== "PARTIAL" || !obj) return;
      for (const key of Object.keys(obj)) {
        if (!columns.includes(key)) columns.push(key);
      }
    });
    return columns;
  }

  /** Numeric measurement columns as plot series over seq. */
  series(): { name: string; points: [number, number][] }[] {
    const out = new Map<string, [number, number][]>();
    const parsed = this.parsed();
    this.rows.forEach((row, i) => {
      const obj = parsed[i];
      if (row.kind !== "PARTIAL" || !obj) return;
      for (const [key, value] of Object.entries(obj)) {
        if (typeof value !== "number") continue;
        if (!out.has(key)) out.set(key, []);
        out.get(key)!.push([row.seq, value]);
      }
    });
    return [...out.entries()].map(([name, points]) => ({ name, points }));
  }

  finalRow(): ResultRow | null {
    const last = this.rows[this.rows.length - 1];
    return last && last.kind === "FINAL" ? last : null;
  }
}
