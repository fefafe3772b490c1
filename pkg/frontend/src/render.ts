import type { Candidate, CandidateDetail, CurveSeries, FoldedSeries } from './types.js';

/** SVG builders for the candidate panels.
 *
 * Every plotted point carries the payload value verbatim in data-*
 * attributes, so tests (and curious reviewers) can diff the rendering
 * against the fetched JSON: the UI adds nothing and recomputes nothing.
 * Magnitude axes are inverted — smaller magnitude means brighter, and
 * brighter belongs at the top.
 */

export const PLOT_WIDTH = 640;
export const PLOT_HEIGHT = 240;
const MARGIN = { top: 14, right: 16, bottom: 26, left: 52 };

interface Span {
  lo: number;
  hi: number;
}

function span(values: number[], padFraction = 0.06): Span {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (!Number.isFinite(v)) continue;
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (lo === Infinity) return { lo: 0, hi: 1 };
  if (lo === hi) return { lo: lo - 0.5, hi: hi + 0.5 };
  const pad = (hi - lo) * padFraction;
  return { lo: lo - pad, hi: hi + pad };
}

function xScale(s: Span): (v: number) => number {
  const width = PLOT_WIDTH - MARGIN.left - MARGIN.right;
  return (v) => MARGIN.left + ((v - s.lo) / (s.hi - s.lo)) * width;
}

/** Inverted: the span's low magnitude (brightest) maps to the top. */
function magScale(s: Span): (v: number) => number {
  const height = PLOT_HEIGHT - MARGIN.top - MARGIN.bottom;
  return (v) => MARGIN.top + ((v - s.lo) / (s.hi - s.lo)) * height;
}

function fmt(v: number): string {
  return Number.isInteger(v) ? String(v) : v.toPrecision(5);
}

function axes(title: string, xLabel: string, xSpan: Span, ySpan: Span): string {
  const x0 = MARGIN.left;
  const x1 = PLOT_WIDTH - MARGIN.right;
  const y0 = MARGIN.top;
  const y1 = PLOT_HEIGHT - MARGIN.bottom;
  return [
    `<text class="plot-title" x="${x0}" y="${y0 - 3}">${title}</text>`,
    `<line class="axis" x1="${x0}" y1="${y1}" x2="${x1}" y2="${y1}"/>`,
    `<line class="axis" x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}"/>`,
    `<text class="tick" x="${x0}" y="${y1 + 16}">${fmt(xSpan.lo)}</text>`,
    `<text class="tick" text-anchor="end" x="${x1}" y="${y1 + 16}">${fmt(xSpan.hi)}</text>`,
    `<text class="tick" text-anchor="end" x="${x0 - 4}" y="${y0 + 8}">${fmt(ySpan.lo)}</text>`,
    `<text class="tick" text-anchor="end" x="${x0 - 4}" y="${y1}">${fmt(ySpan.hi)}</text>`,
    `<text class="tick" x="${Math.round((x0 + x1) / 2)}" y="${y1 + 16}" text-anchor="middle">${xLabel}</text>`,
  ].join('');
}

function svgOpen(cls: string): string {
  return (
    `<svg class="${cls}" viewBox="0 0 ${PLOT_WIDTH} ${PLOT_HEIGHT}" ` +
    `width="${PLOT_WIDTH}" height="${PLOT_HEIGHT}" xmlns="http://www.w3.org/2000/svg">`
  );
}

/** Raw series: one marker per observation plus a vertical error bar. */
export function renderRawCurve(curve: CurveSeries): string {
  const xs = span(curve.times);
  const ys = span(curve.magnitudes);
  const sx = xScale(xs);
  const sy = magScale(ys);
  const parts: string[] = [svgOpen('raw-curve'), axes('raw', 'time [d]', xs, ys)];
  for (let i = 0; i < curve.times.length; i++) {
    const t = curve.times[i]!;
    const m = curve.magnitudes[i]!;
    const e = curve.errors[i] ?? 0;
    const x = sx(t);
    parts.push(
      `<line class="err" x1="${x}" y1="${sy(m - e)}" x2="${x}" y2="${sy(m + e)}"/>`,
      `<circle class="pt" cx="${x}" cy="${sy(m)}" r="1.8" data-time="${t}" data-mag="${m}" data-err="${e}"/>`,
    );
  }
  parts.push('</svg>');
  return parts.join('');
}

/** Folded series, or a notice when the service reported no valid period. */
export function renderFoldedCurve(
  folded: FoldedSeries | null,
  foldedValid: boolean,
  period: number | null,
): string {
  if (!foldedValid || folded === null) {
    return '<div class="panel-notice folded-missing">no valid period</div>';
  }
  const xs: Span = { lo: 0, hi: 1 };
  const ys = span(folded.magnitudes);
  const sx = xScale(xs);
  const sy = magScale(ys);
  const title = period === null ? 'folded' : `folded at ${fmt(period)} d`;
  const parts: string[] = [svgOpen('folded-curve'), axes(title, 'phase', xs, ys)];
  for (let i = 0; i < folded.phases.length; i++) {
    const p = folded.phases[i]!;
    const m = folded.magnitudes[i]!;
    parts.push(
      `<circle class="pt" cx="${sx(p)}" cy="${sy(m)}" r="1.8" data-phase="${p}" data-mag="${m}"/>`,
    );
  }
  parts.push('</svg>');
  return parts.join('');
}

/** One labeled bar per class; widths are the vote fractions as sent. */
export function renderVoteBars(votes: number[], classNames: string[]): string {
  const rowHeight = 24;
  const labelWidth = 150;
  const height = Math.max(votes.length * rowHeight + 8, 32);
  const barSpan = PLOT_WIDTH - labelWidth - 70;
  const parts: string[] = [
    `<svg class="vote-bars" viewBox="0 0 ${PLOT_WIDTH} ${height}" ` +
      `width="${PLOT_WIDTH}" height="${height}" xmlns="http://www.w3.org/2000/svg">`,
  ];
  for (let i = 0; i < votes.length; i++) {
    const v = votes[i]!;
    const name = classNames[i] ?? `class ${i}`;
    const y = 4 + i * rowHeight;
    parts.push(
      `<text class="vote-label" x="${labelWidth - 6}" y="${y + 15}" text-anchor="end">${name}</text>`,
      `<rect class="vote-bar" x="${labelWidth}" y="${y + 3}" width="${Math.max(v * barSpan, 0)}" ` +
        `height="${rowHeight - 8}" data-class="${name}" data-vote="${v}"/>`,
      `<text class="vote-value" x="${labelWidth + Math.max(v * barSpan, 0) + 6}" y="${y + 15}">${v.toFixed(3)}</text>`,
    );
  }
  parts.push('</svg>');
  return parts.join('');
}

/** Score/rank header line with the per-object context fields. */
export function renderScoreHeader(c: Candidate): string {
  const bits: string[] = [
    `<span class="hdr-rank">#${c.rank}</span>`,
    `<span class="hdr-id">${c.object_id}</span>`,
    `<span class="hdr-score">score ${c.score.toFixed(6)}</span>`,
    `<span class="hdr-period">${c.period === null ? 'no period' : `P=${fmt(c.period)} d`}</span>`,
    `<span class="hdr-band">${c.band}</span>`,
    `<span class="hdr-label">${c.triage_label}</span>`,
  ];
  if (c.snr !== null) bits.push(`<span class="hdr-snr">snr ${fmt(c.snr)}</span>`);
  for (const note of c.annotations) bits.push(`<span class="hdr-note">${note}</span>`);
  return `<header class="candidate-header">${bits.join(' ')}</header>`;
}

/** Full candidate panel: header, raw curve (when a curve source exists),
 * folded curve or its notice, and the vote bars. */
export function renderCandidate(detail: CandidateDetail, classNames: string[]): string {
  const parts: string[] = [renderScoreHeader(detail)];
  if (detail.curve !== null) {
    parts.push(renderRawCurve(detail.curve));
    parts.push(renderFoldedCurve(detail.folded, detail.folded_valid, detail.period));
  } else {
    parts.push('<div class="panel-notice curve-missing">no curve source configured</div>');
  }
  parts.push(renderVoteBars(detail.votes, classNames));
  return `<section class="candidate-panel">${parts.join('')}</section>`;
}
