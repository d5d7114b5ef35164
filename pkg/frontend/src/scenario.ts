/**
 * Scenario draft state: the user's pending edits for one patient.
 * A draft holds only what the user touched; buildScenario turns it into
 * the exact request body the service expects.
 */

import type { AnchorSettings, PatientDetail, PeriodEdit, Scenario } from './types.js';

export interface ScenarioDraft {
  patientId: string;
  nPeriods: number;
  context: number;
  /** period -> action index -> desired on/off, only for touched toggles */
  toggles: Map<number, Map<number, boolean>>;
  /** period -> replacement communication text */
  texts: Map<number, string>;
  anchor: AnchorSettings;
}

export const defaultContext = (nPeriods: number): number =>
  Math.max(3, Math.floor(nPeriods / 2));

export const defaultAnchor = (): AnchorSettings => ({
  enabled: false,
  weight: 1.0,
  jump_cap: 5.0,
  trend_window: 3,
});

export const createDraft = (
  detail: PatientDetail,
  context?: number
): ScenarioDraft => {
  const c = context ?? defaultContext(detail.n_periods);
  if (c < 1 || c >= detail.n_periods) {
    throw new Error(`context ${c} out of range [1, ${detail.n_periods})`);
  }
  return {
    patientId: detail.patient_id,
    nPeriods: detail.n_periods,
    context: c,
    toggles: new Map(),
    texts: new Map(),
    anchor: defaultAnchor(),
  };
};

export const futurePeriods = (draft: ScenarioDraft): number[] => {
  const periods: number[] = [];
  for (let t = draft.context; t < draft.nPeriods; t++) periods.push(t);
  return periods;
};

const assertFuturePeriod = (draft: ScenarioDraft, period: number): void => {
  if (period < draft.context || period >= draft.nPeriods) {
    throw new Error(
      `period ${period} outside forecast range [${draft.context}, ${draft.nPeriods})`
    );
  }
};

export const setActionToggle = (
  draft: ScenarioDraft,
  period: number,
  action: number,
  on: boolean
): void => {
  assertFuturePeriod(draft, period);
  let row = draft.toggles.get(period);
  if (!row) {
    row = new Map();
    draft.toggles.set(period, row);
  }
  row.set(action, on);
};

export const setPeriodText = (
  draft: ScenarioDraft,
  period: number,
  text: string
): void => {
  assertFuturePeriod(draft, period);
  const trimmed = text.trim();
  if (trimmed) draft.texts.set(period, trimmed);
  else draft.texts.delete(period);
};

/** Current toggle state for the grid: the user's override or the recorded value. */
export const effectiveToggle = (
  draft: ScenarioDraft,
  detail: PatientDetail,
  period: number,
  action: number
): boolean => {
  const touched = draft.toggles.get(period)?.get(action);
  if (touched !== undefined) return touched;
  return detail.periods[period].a_struct[action] > 0;
};

export const buildScenario = (draft: ScenarioDraft): Scenario => {
  const edits: PeriodEdit[] = [];
  for (const period of futurePeriods(draft)) {
    const row = draft.toggles.get(period);
    const text = draft.texts.get(period);
    const setActions: number[] = [];
    const clearActions: number[] = [];
    if (row) {
      for (const action of Array.from(row.keys()).sort((a, b) => a - b)) {
        if (row.get(action)) setActions.push(action);
        else clearActions.push(action);
      }
    }
    if (!setActions.length && !clearActions.length && text === undefined) continue;
    const edit: PeriodEdit = {
      period,
      set_actions: setActions,
      clear_actions: clearActions,
    };
    if (text !== undefined) edit.comm_text = text;
    edits.push(edit);
  }
  return {
    patient_id: draft.patientId,
    context: draft.context,
    edits,
    anchor: { ...draft.anchor },
  };
};

/** Stable identity of a draft's request body; unchanged drafts compare equal. */
export const draftFingerprint = (draft: ScenarioDraft): string =>
  JSON.stringify(buildScenario(draft));
