/**
 * Test support: fixture loading and a fixture-backed fetch stub.
 * Fixtures are recorded from the real service by scripts/record_fixtures.py,
 * so matching a POST body against a recorded request verifies the client
 * builds exactly the payloads the service accepted.
 */

import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

import type {
  ModelInfo,
  PatientDetail,
  PatientListResponse,
  RolloutResponse,
  Scenario,
} from '../src/types.js';

const here = dirname(fileURLToPath(import.meta.url));

export const fixture = <T>(name: string): T =>
  JSON.parse(readFileSync(join(here, 'fixtures', name), 'utf-8')) as T;

export interface RolloutPair {
  request: Scenario;
  response: RolloutResponse;
}

export interface ErrorFixture {
  status: number;
  body: { detail: string };
}

export interface Fixtures {
  patients: PatientListResponse;
  detail: PatientDetail;
  model: ModelInfo;
  noedit: RolloutPair;
  positive: RolloutPair;
  errors: { not_found: ErrorFixture; bad_request: ErrorFixture };
}

export const loadFixtures = (): Fixtures => ({
  patients: fixture('patients.json'),
  detail: fixture('patient_detail.json'),
  model: fixture('model.json'),
  noedit: fixture('rollout_noedit.json'),
  positive: fixture('rollout_positive.json'),
  errors: fixture('errors.json'),
});

/** JSON value with recursively sorted object keys, for order-free equality. */
const canonical = (value: unknown): string =>
  JSON.stringify(value, (_k, v) =>
    v && typeof v === 'object' && !Array.isArray(v)
      ? Object.fromEntries(
          Object.keys(v as Record<string, unknown>)
            .sort()
            .map((k) => [k, (v as Record<string, unknown>)[k]])
        )
      : v
  );

export const sameJson = (a: unknown, b: unknown): boolean =>
  canonical(a) === canonical(b);

interface StubResponse {
  ok: boolean;
  status: number;
  statusText: string;
  json(): Promise<unknown>;
}

const reply = (status: number, body: unknown): StubResponse => ({
  ok: status >= 200 && status < 300,
  status,
  statusText: String(status),
  json: async () => body,
});

interface PendingRollout {
  body: Scenario;
  resolve(res: StubResponse): void;
}

export class FakeService {
  posts: Scenario[] = [];
  rolloutCalls = 0;
  /** when true, POST /v1/rollout promises wait for resolveRollout() */
  manualRollout = false;
  failNextRollout: ErrorFixture | null = null;
  networkFail = false;
  private pending: PendingRollout[] = [];

  constructor(private fx: Fixtures) {}

  get pendingCount(): number {
    return this.pending.length;
  }

  /** resolve a held rollout (oldest first by default) with the payload */
  resolveRollout(response: RolloutResponse, index = 0): void {
    const [entry] = this.pending.splice(index, 1);
    if (!entry) throw new Error('no pending rollout to resolve');
    entry.resolve(reply(200, response));
  }

  fetch = (input: string | URL, init?: RequestInit): Promise<StubResponse> => {
    if (this.networkFail) {
      return Promise.reject(new TypeError('fetch failed'));
    }
    const url = String(input);
    const method = init?.method ?? 'GET';
    if (method === 'POST' && url === '/v1/rollout') {
      this.rolloutCalls += 1;
      const body = JSON.parse(String(init?.body)) as Scenario;
      this.posts.push(body);
      if (this.failNextRollout) {
        const err = this.failNextRollout;
        this.failNextRollout = null;
        return Promise.resolve(reply(err.status, err.body));
      }
      if (this.manualRollout) {
        return new Promise((resolve) => this.pending.push({ body, resolve }));
      }
      if (sameJson(body, this.fx.noedit.request)) {
        return Promise.resolve(reply(200, this.fx.noedit.response));
      }
      if (sameJson(body, this.fx.positive.request)) {
        return Promise.resolve(reply(200, this.fx.positive.response));
      }
      return Promise.resolve(reply(400, { detail: 'unrecorded scenario' }));
    }
    if (url === '/v1/patients') {
      return Promise.resolve(reply(200, this.fx.patients));
    }
    if (url === `/v1/patients/${this.fx.detail.patient_id}`) {
      return Promise.resolve(reply(200, this.fx.detail));
    }
    if (url.startsWith('/v1/patients/')) {
      return Promise.resolve(
        reply(this.fx.errors.not_found.status, this.fx.errors.not_found.body)
      );
    }
    if (url === '/v1/model') {
      return Promise.resolve(reply(200, this.fx.model));
    }
    return Promise.resolve(reply(404, { detail: `no route for ${url}` }));
  };
}

export const tick = (): Promise<void> =>
  new Promise((resolve) => setTimeout(resolve, 0));

export const until = async (cond: () => boolean, tries = 50): Promise<void> => {
  for (let i = 0; i < tries; i++) {
    if (cond()) return;
    await tick();
  }
  throw new Error('condition not met');
};

/** numeric data-value attributes under root for a selector, in DOM order */
export const dataValues = (root: ParentNode, selector: string): number[] =>
  Array.from(root.querySelectorAll(selector)).map((el) =>
    Number(el.getAttribute('data-value'))
  );
