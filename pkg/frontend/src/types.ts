/**
 * JSON payload types for the rollout service /v1 API.
 * These mirror the server schema field for field; the fixture tests
 * verify the match against recorded responses.
 */

export interface PatientSummary {
  patient_id: string;
  n_periods: number;
  y_first: number;
  y_last: number;
}

export interface PatientListResponse {
  patients: PatientSummary[];
}

export interface PeriodInfo {
  period: number;
  y: number;
  x: number[];
  a_struct: number[];
  tau: number[];
  comm_norm: number;
}

export interface PatientDetail {
  patient_id: string;
  n_periods: number;
  static: number[];
  action_labels: string[];
  periods: PeriodInfo[];
}

export interface ModelInfo {
  version: string;
  config: Record<string, unknown>;
  loss_weights: Record<string, number>;
  param_count: number;
  n_patients: number;
  meta: Record<string, unknown>;
}

export interface AnchorSettings {
  enabled: boolean;
  weight: number;
  jump_cap: number;
  trend_window: number;
}

export interface PeriodEdit {
  period: number;
  set_actions: number[];
  clear_actions: number[];
  comm_text?: string;
}

export interface Scenario {
  patient_id: string;
  context: number;
  edits: PeriodEdit[];
  anchor: AnchorSettings;
}

export interface RolloutResponse {
  patient_id: string;
  context: number;
  periods: number[];
  baseline: number[];
  counterfactual: number[];
  difference: number[];
  observed: number[];
  anchored_first: boolean;
}
