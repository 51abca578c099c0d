/** Dependency-free SVG line plot: every numeric result column versus seq. */

export interface Series {
  name: string;
  points: [number, number][];
}

const COLORS = ["#2563eb", "#dc2626", "#059669", "#d97706", "#7c3aed", "#0891b2"];

function range(values: number[]): [number, number] {
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  if (lo === hi) {
    lo -= 1;
    hi += 1;
  }
  return [lo, hi];
}

export function renderPlot(series: Series[], width = 640, height = 240): string {
  const populated = series.filter((s) => s.points.length > 0);
  if (populated.length === 0) {
    return `<svg class="plot" viewBox="0 0 ${width} ${height}"></svg>`;
  }
  const pad = 34;
  const xs = populated.flatMap((s) => s.points.map((p) => p[0]));
  const ys = populated.flatMap((s) => s.points.map((p) => p[1]));
  const [x0, x1] = range(xs);
  const [y0, y1] = range(ys);
  const sx = (x: number) => pad + ((x - x0) / (x1 - x0)) * (width - 2 * pad);
  const sy = (y: number) => height - pad - ((y - y0) / (y1 - y0)) * (height - 2 * pad);

  const parts: string[] = [];
  parts.push(`<svg class="plot" viewBox="0 0 ${width} ${height}">`);
  parts.push(
    `<line class="axis" x1="${pad}" y1="${height - pad}" x2="${width - pad}" ` +
      `y2="${height - pad}"></line>`,
    `<line class="axis" x1="${pad}" y1="${pad}" x2="${pad}" y2="${height - pad}"></line>`,
    `<text class="tick" x="${pad}" y="${height - pad + 16}">${x0}</text>`,
    `<text class="tick" x="${width - pad}" y="${height - pad + 16}">${x1}</text>`,
    `<text class="tick" x="2" y="${height - pad}">${y0.toPrecision(4)}</text>`,
    `<text class="tick" x="2" y="${pad}">${y1.toPrecision(4)}</text>`,
  );
  populated.forEach((s, i) => {
    const color = COLORS[i % COLORS.length];
    const coords = s.points.map(([x, y]) => `${sx(x).toFixed(1)},${sy(y).toFixed(1)}`);
    parts.push(
      `<polyline data-series="${s.name}" fill="none" stroke="${color}" ` +
        `stroke-width="1.5" points="${coords.join(" ")}"></polyline>`,
      `<text class="legend" x="${pad + 8 + i * 120}" y="${pad - 14}" ` +
        `fill="${color}">${s.name}</text>`,
    );
  });
  parts.push("</svg>");
  return parts.join("");
}
