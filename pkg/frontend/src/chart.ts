/**
 * SVG line chart for outcome trajectories. Pure string rendering: callers
 * inject the output with innerHTML. Every plotted point carries its source
 * number verbatim in a data-value attribute so the DOM can be audited
 * against the service payload.
 */

export interface ChartSeries {
  name: string;
  /** css class suffix, e.g. "history" renders as .series-history */
  kind: string;
  /** period index of the first value */
  start: number;
  values: number[];
}

export interface ChartModel {
  width: number;
  height: number;
  padLeft: number;
  padRight: number;
  padTop: number;
  padBottom: number;
  minPeriod: number;
  maxPeriod: number;
  minValue: number;
  maxValue: number;
  x(period: number): number;
  y(value: number): number;
}

const PAD = { left: 44, right: 16, top: 12, bottom: 28 };

export const buildChartModel = (
  seriesList: ChartSeries[],
  width = 640,
  height = 280
): ChartModel => {
  let minPeriod = Infinity;
  let maxPeriod = -Infinity;
  let minValue = Infinity;
  let maxValue = -Infinity;
  for (const s of seriesList) {
    for (let i = 0; i < s.values.length; i++) {
      const period = s.start + i;
      const value = s.values[i];
      if (period < minPeriod) minPeriod = period;
      if (period > maxPeriod) maxPeriod = period;
      if (value < minValue) minValue = value;
      if (value > maxValue) maxValue = value;
    }
  }
  if (!isFinite(minPeriod)) {
    minPeriod = 0;
    maxPeriod = 1;
    minValue = 0;
    maxValue = 1;
  }
  if (minValue === maxValue) {
    minValue -= 1;
    maxValue += 1;
  }
  const innerW = width - PAD.left - PAD.right;
  const innerH = height - PAD.top - PAD.bottom;
  const periodSpan = Math.max(1, maxPeriod - minPeriod);
  const valueSpan = maxValue - minValue;
  return {
    width,
    height,
    padLeft: PAD.left,
    padRight: PAD.right,
    padTop: PAD.top,
    padBottom: PAD.bottom,
    minPeriod,
    maxPeriod,
    minValue,
    maxValue,
    x: (period) => PAD.left + ((period - minPeriod) / periodSpan) * innerW,
    y: (value) => PAD.top + (1 - (value - minValue) / valueSpan) * innerH,
  };
};

const escapeAttr = (text: string): string =>
  text.replace(/&/g, '&amp;').replace(/"/g, '&quot;').replace(/</g, '&lt;');

const fmt = (n: number): string => String(Math.round(n * 100) / 100);

const renderSeries = (model: ChartModel, s: ChartSeries): string => {
  const pts: string[] = [];
  const dots: string[] = [];
  for (let i = 0; i < s.values.length; i++) {
    const period = s.start + i;
    const value = s.values[i];
    const px = fmt(model.x(period));
    const py = fmt(model.y(value));
    pts.push(`${px},${py}`);
    dots.push(
      `<circle class="pt series-${s.kind}" cx="${px}" cy="${py}" r="3" ` +
        `data-series="${escapeAttr(s.name)}" data-period="${period}" ` +
        `data-value="${String(value)}"></circle>`
    );
  }
  const line =
    s.values.length > 1
      ? `<polyline class="line series-${s.kind}" fill="none" points="${pts.join(' ')}"></polyline>`
      : '';
  return `<g data-series-group="${escapeAttr(s.name)}">${line}${dots.join('')}</g>`;
};

const renderAxes = (model: ChartModel): string => {
  const parts: string[] = [];
  const x0 = model.padLeft;
  const x1 = model.width - model.padRight;
  const y0 = model.height - model.padBottom;
  parts.push(
    `<line class="axis" x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}"></line>`,
    `<line class="axis" x1="${x0}" y1="${model.padTop}" x2="${x0}" y2="${y0}"></line>`
  );
  const ticks = 4;
  for (let i = 0; i <= ticks; i++) {
    const v = model.minValue + ((model.maxValue - model.minValue) * i) / ticks;
    const py = fmt(model.y(v));
    parts.push(
      `<text class="tick" x="${x0 - 6}" y="${py}" text-anchor="end" ` +
        `dominant-baseline="middle">${v.toFixed(1)}</text>`
    );
  }
  for (let p = model.minPeriod; p <= model.maxPeriod; p++) {
    parts.push(
      `<text class="tick" x="${fmt(model.x(p))}" y="${y0 + 16}" ` +
        `text-anchor="middle">${p}</text>`
    );
  }
  return parts.join('');
};

export interface ChartOptions {
  width?: number;
  height?: number;
  /** draw a vertical divider after the last history period */
  contextDivider?: number;
}

export const renderChart = (
  seriesList: ChartSeries[],
  opts: ChartOptions = {}
): string => {
  const model = buildChartModel(seriesList, opts.width, opts.height);
  const parts: string[] = [renderAxes(model)];
  if (
    opts.contextDivider !== undefined &&
    opts.contextDivider >= model.minPeriod &&
    opts.contextDivider <= model.maxPeriod
  ) {
    const px = fmt(model.x(opts.contextDivider));
    parts.push(
      `<line class="divider" x1="${px}" y1="${model.padTop}" ` +
        `x2="${px}" y2="${model.height - model.padBottom}"></line>`
    );
  }
  for (const s of seriesList) parts.push(renderSeries(model, s));
  return (
    `<svg viewBox="0 0 ${model.width} ${model.height}" role="img" ` +
    `preserveAspectRatio="xMidYMid meet">${parts.join('')}</svg>`
  );
};

export const renderLegend = (seriesList: ChartSeries[]): string =>
  `<ul class="legend">${seriesList
    .map(
      (s) =>
        `<li><span class="swatch series-${s.kind}"></span>${escapeAttr(s.name)}</li>`
    )
    .join('')}</ul>`;
