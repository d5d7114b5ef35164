/**
 * Thin fetch client for the rollout service.
 * All prediction math happens server-side; this module only moves JSON.
 */

import type {
  ModelInfo,
  PatientDetail,
  PatientListResponse,
  RolloutResponse,
  Scenario,
} from './types.js';

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = 'ApiError';
  }
}

const extractDetail = async (res: Response): Promise<string> => {
  try {
    const body = await res.json();
    if (body && typeof body.detail === 'string') return body.detail;
    if (body && body.detail !== undefined) return JSON.stringify(body.detail);
  } catch {
    // non-JSON error body; fall through to the status text
  }
  return res.statusText || 'request failed';
};

export class ApiClient {
  constructor(readonly baseUrl: string = '') {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await fetch(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    if (!res.ok) {
      throw new ApiError(res.status, await extractDetail(res));
    }
    return (await res.json()) as T;
  }

  listPatients(): Promise<PatientListResponse> {
    return this.request<PatientListResponse>('/v1/patients');
  }

  getPatient(id: string): Promise<PatientDetail> {
    return this.request<PatientDetail>(`/v1/patients/${encodeURIComponent(id)}`);
  }

  getModel(): Promise<ModelInfo> {
    return this.request<ModelInfo>('/v1/model');
  }

  submitRollout(scenario: Scenario): Promise<RolloutResponse> {
    return this.request<RolloutResponse>('/v1/rollout', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(scenario),
    });
  }
}
