/**
 * What-if explorer controller. Wires the patient list, the per-period
 * action editor, and the forecast comparison chart to the /v1 service.
 * The client does no prediction math of its own: every plotted or tabled
 * number is taken verbatim from a service response.
 */

import { ApiClient, ApiError } from './api.js';
import { renderChart, renderLegend } from './chart.js';
import type { ChartSeries } from './chart.js';
import {
  buildScenario,
  createDraft,
  draftFingerprint,
  effectiveToggle,
  futurePeriods,
  setActionToggle,
  setPeriodText,
} from './scenario.js';
import type { ScenarioDraft } from './scenario.js';
import type {
  ModelInfo,
  PatientDetail,
  PatientSummary,
  RolloutResponse,
  Scenario,
} from './types.js';

interface RunRecord {
  index: number;
  scenario: Scenario;
  response: RolloutResponse;
  editCount: number;
  meanDifference: number;
}

const escapeHtml = (text: string): string =>
  text.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;');

const show = (value: number): string => value.toFixed(2);

export class WhatIfApp {
  private root: HTMLElement;
  private client: ApiClient;
  private patients: PatientSummary[] = [];
  private model: ModelInfo | null = null;
  private detail: PatientDetail | null = null;
  private draft: ScenarioDraft | null = null;
  private result: RolloutResponse | null = null;
  private lastFingerprint: string | null = null;
  private runs: RunRecord[] = [];
  private requestToken = 0;

  constructor(root: HTMLElement, client: ApiClient) {
    this.root = root;
    this.client = client;
    this.root.innerHTML = `
      <div class="layout">
        <aside class="sidebar">
          <h2>Patients</h2>
          <ul class="patient-list" data-role="patient-list"></ul>
          <div class="model-info" data-role="model-info"></div>
        </aside>
        <section class="workspace">
          <div class="status" data-role="status" hidden></div>
          <div data-role="detail"></div>
          <div data-role="result"></div>
          <div data-role="runs"></div>
        </section>
      </div>`;
    this.bindEvents();
  }

  private $(selector: string): HTMLElement {
    const el = this.root.querySelector<HTMLElement>(selector);
    if (!el) throw new Error(`missing element: ${selector}`);
    return el;
  }

  getDraft(): ScenarioDraft | null {
    return this.draft;
  }

  getResult(): RolloutResponse | null {
    return this.result;
  }

  getRuns(): RunRecord[] {
    return this.runs.slice();
  }

  async start(): Promise<void> {
    try {
      const [list, model] = await Promise.all([
        this.client.listPatients(),
        this.client.getModel(),
      ]);
      this.patients = list.patients;
      this.model = model;
      this.renderPatientList();
      this.renderModelInfo();
      this.clearStatus();
    } catch (err) {
      this.showError(err);
    }
  }

  async selectPatient(id: string): Promise<void> {
    const token = ++this.requestToken;
    try {
      const detail = await this.client.getPatient(id);
      if (token !== this.requestToken) return;
      this.detail = detail;
      this.draft = createDraft(detail);
      this.result = null;
      this.lastFingerprint = null;
      this.clearStatus();
      this.renderDetail();
      this.$('[data-role="result"]').innerHTML = '';
    } catch (err) {
      if (token !== this.requestToken) return;
      this.showError(err);
    }
  }

  async submit(): Promise<void> {
    if (!this.draft || !this.detail) {
      this.showMessage('select a patient first');
      return;
    }
    const fingerprint = draftFingerprint(this.draft);
    if (fingerprint === this.lastFingerprint && this.result) return;
    const scenario = buildScenario(this.draft);
    const token = ++this.requestToken;
    try {
      const response = await this.client.submitRollout(scenario);
      if (token !== this.requestToken) return;
      this.result = response;
      this.lastFingerprint = fingerprint;
      const run: RunRecord = {
        index: this.runs.length + 1,
        scenario,
        response,
        editCount: scenario.edits.length,
        meanDifference: response.difference.length
          ? response.difference.reduce((a, b) => a + b, 0) /
            response.difference.length
          : 0,
      };
      this.runs.push(run);
      this.clearStatus();
      this.renderResult(response);
      this.renderRuns();
    } catch (err) {
      if (token !== this.requestToken) return;
      this.showError(err);
    }
  }

  private bindEvents(): void {
    this.root.addEventListener('click', (ev) => {
      const target = ev.target as HTMLElement;
      const item = target.closest<HTMLElement>('[data-role="patient-item"]');
      if (item && item.dataset.id) {
        void this.selectPatient(item.dataset.id);
        return;
      }
      const run = target.closest<HTMLElement>('[data-role="run-item"]');
      if (run && run.dataset.index) {
        const record = this.runs[Number(run.dataset.index) - 1];
        if (record) this.renderResult(record.response);
        return;
      }
      if (target.closest('[data-role="submit"]')) void this.submit();
    });
    this.root.addEventListener('change', (ev) => {
      const target = ev.target as HTMLInputElement;
      if (!this.draft) return;
      const role = target.dataset.role;
      if (role === 'action-toggle') {
        setActionToggle(
          this.draft,
          Number(target.dataset.period),
          Number(target.dataset.action),
          target.checked
        );
      } else if (role === 'period-text') {
        setPeriodText(this.draft, Number(target.dataset.period), target.value);
      } else if (role === 'anchor-enabled') {
        this.draft.anchor.enabled = target.checked;
      } else if (role === 'anchor-weight') {
        const v = Number(target.value);
        if (isFinite(v)) this.draft.anchor.weight = v;
      } else if (role === 'anchor-cap') {
        const v = Number(target.value);
        if (isFinite(v)) this.draft.anchor.jump_cap = v;
      } else if (role === 'anchor-window') {
        const v = Number(target.value);
        if (isFinite(v) && v >= 1) this.draft.anchor.trend_window = Math.floor(v);
      }
    });
  }

  private renderPatientList(): void {
    this.$('[data-role="patient-list"]').innerHTML = this.patients
      .map(
        (p) => `
        <li>
          <button type="button" data-role="patient-item" data-id="${escapeHtml(p.patient_id)}">
            <span class="pid">${escapeHtml(p.patient_id)}</span>
            <span class="meta">${p.n_periods} periods, ${show(p.y_first)} to ${show(p.y_last)}</span>
          </button>
        </li>`
      )
      .join('');
  }

  private renderModelInfo(): void {
    if (!this.model) return;
    this.$('[data-role="model-info"]').innerHTML = `
      <h3>Model</h3>
      <dl>
        <dt>version</dt><dd>${escapeHtml(this.model.version)}</dd>
        <dt>parameters</dt><dd>${this.model.param_count}</dd>
        <dt>patients</dt><dd>${this.model.n_patients}</dd>
      </dl>`;
  }

  private historySeries(detail: PatientDetail, context: number): ChartSeries[] {
    const y = detail.periods.map((p) => p.y);
    const series: ChartSeries[] = [
      { name: 'history', kind: 'history', start: 0, values: y.slice(0, context) },
    ];
    if (context < y.length) {
      series.push({
        name: 'observed future',
        kind: 'observed',
        start: context,
        values: y.slice(context),
      });
    }
    return series;
  }

  private renderDetail(): void {
    if (!this.detail || !this.draft) return;
    const detail = this.detail;
    const draft = this.draft;
    const series = this.historySeries(detail, draft.context);
    const labels = detail.action_labels;
    const rows = futurePeriods(draft)
      .map((period) => {
        const cells = labels
          .map((_, action) => {
            const checked = effectiveToggle(draft, detail, period, action)
              ? ' checked'
              : '';
            return `<td><input type="checkbox" data-role="action-toggle"
              data-period="${period}" data-action="${action}"${checked}></td>`;
          })
          .join('');
        return `
          <tr data-period="${period}">
            <th>${period}</th>
            ${cells}
            <td><input type="text" data-role="period-text" data-period="${period}"
              placeholder="replacement note"></td>
          </tr>`;
      })
      .join('');
    this.$('[data-role="detail"]').innerHTML = `
      <h2>Patient ${escapeHtml(detail.patient_id)}</h2>
      <p class="hint">${detail.n_periods} periods observed,
        forecasting from period ${draft.context} onward.</p>
      <div class="chart" data-role="history-chart">
        ${renderChart(series, { contextDivider: draft.context - 0.5 })}
      </div>
      ${renderLegend(series)}
      <form data-role="editor" class="editor">
        <table class="action-grid" data-role="action-grid">
          <thead>
            <tr>
              <th>period</th>
              ${labels.map((l) => `<th>${escapeHtml(l)}</th>`).join('')}
              <th>communication</th>
            </tr>
          </thead>
          <tbody>${rows}</tbody>
        </table>
        <fieldset class="anchor">
          <legend>first-step anchor</legend>
          <label><input type="checkbox" data-role="anchor-enabled">enabled</label>
          <label>weight
            <input type="number" data-role="anchor-weight" value="1" step="0.1" min="0" max="1"></label>
          <label>jump cap
            <input type="number" data-role="anchor-cap" value="5" step="0.5" min="0"></label>
          <label>trend window
            <input type="number" data-role="anchor-window" value="3" step="1" min="1"></label>
        </fieldset>
        <button type="button" class="submit" data-role="submit">Run what-if</button>
      </form>`;
  }

  private renderResult(response: RolloutResponse): void {
    if (!this.detail) return;
    const context = response.context;
    const series: ChartSeries[] = [
      ...this.historySeries(this.detail, context),
      {
        name: 'baseline forecast',
        kind: 'baseline',
        start: context,
        values: response.baseline,
      },
      {
        name: 'what-if forecast',
        kind: 'counterfactual',
        start: context,
        values: response.counterfactual,
      },
    ];
    const rows = response.periods
      .map((period, i) => {
        const b = response.baseline[i];
        const cf = response.counterfactual[i];
        const d = response.difference[i];
        const obs = response.observed[i];
        return `
          <tr data-period="${period}">
            <th>${period}</th>
            <td data-role="cell-baseline" data-value="${String(b)}">${show(b)}</td>
            <td data-role="cell-counterfactual" data-value="${String(cf)}">${show(cf)}</td>
            <td data-role="cell-difference" data-value="${String(d)}"
              class="${d > 0 ? 'up' : d < 0 ? 'down' : ''}">${show(d)}</td>
            <td data-role="cell-observed" data-value="${String(obs)}">${show(obs)}</td>
          </tr>`;
      })
      .join('');
    this.$('[data-role="result"]').innerHTML = `
      <h3>Forecast comparison</h3>
      <div class="chart" data-role="result-chart">
        ${renderChart(series, { contextDivider: context - 0.5 })}
      </div>
      ${renderLegend(series)}
      ${response.anchored_first ? '<p class="hint">first step anchored to recent trend</p>' : ''}
      <table class="delta-table" data-role="delta-table">
        <thead>
          <tr><th>period</th><th>baseline</th><th>what-if</th>
            <th>difference</th><th>observed</th></tr>
        </thead>
        <tbody>${rows}</tbody>
      </table>`;
  }

  private renderRuns(): void {
    if (!this.runs.length) {
      this.$('[data-role="runs"]').innerHTML = '';
      return;
    }
    this.$('[data-role="runs"]').innerHTML = `
      <h3>Session runs</h3>
      <ul class="run-list">
        ${this.runs
          .map(
            (r) => `
            <li>
              <button type="button" data-role="run-item" data-index="${r.index}">
                run ${r.index}: ${r.editCount} edited period${r.editCount === 1 ? '' : 's'},
                mean shift <span data-role="run-delta"
                  data-value="${String(r.meanDifference)}">${show(r.meanDifference)}</span>
              </button>
            </li>`
          )
          .join('')}
      </ul>`;
  }

  private showError(err: unknown): void {
    const el = this.$('[data-role="status"]');
    if (err instanceof ApiError) {
      el.textContent = err.status
        ? `request failed (${err.status}): ${err.detail}`
        : err.detail;
    } else {
      el.textContent = String(err);
    }
    el.hidden = false;
    el.classList.add('error');
  }

  private showMessage(text: string): void {
    const el = this.$('[data-role="status"]');
    el.textContent = text;
    el.hidden = false;
    el.classList.remove('error');
  }

  private clearStatus(): void {
    const el = this.$('[data-role="status"]');
    el.textContent = '';
    el.hidden = true;
    el.classList.remove('error');
  }
}

export const initApp = (root: HTMLElement, client: ApiClient): WhatIfApp =>
  new WhatIfApp(root, client);
