import { describe, expect, it } from 'vitest';

import { ApiClient, ApiError, inArtifactGroup, replayLabelLog } from '../src/api.js';
import type { Candidate, LabelEntry, RetrainJob } from '../src/types.js';

interface Recorded {
  url: string;
  method: string;
  headers: Record<string, string>;
  body: string | undefined;
}

/** fetch double that records each request and replays scripted responses. */
function fakeFetch(responses: Array<{ status?: number; body?: unknown; raw?: string }>) {
  const calls: Recorded[] = [];
  const impl: typeof fetch = async (input, init) => {
    const next = responses.shift() ?? { status: 200, body: {} };
    calls.push({
      url: String(input),
      method: init?.method ?? 'GET',
      headers: (init?.headers as Record<string, string>) ?? {},
      body: typeof init?.body === 'string' ? init.body : undefined,
    });
    const text = next.raw ?? JSON.stringify(next.body ?? {});
    return new Response(text, {
      status: next.status ?? 200,
      headers: { 'Content-Type': 'application/json' },
    });
  };
  return { impl, calls };
}

describe('ApiClient request building', () => {
  it('lists runs from GET /runs', async () => {
    const { impl, calls } = fakeFetch([{ body: { runs: [{ run_id: 'run-1' }] } }]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    const runs = await api.listRuns();
    expect(runs).toEqual([{ run_id: 'run-1' }]);
    expect(calls[0]).toMatchObject({ url: 'http://h:1/runs', method: 'GET' });
    expect(calls[0]?.headers['Content-Type']).toBeUndefined();
  });

  it('encodes paging and filter parameters', async () => {
    const { impl, calls } = fakeFetch([{ body: { candidates: [] } }]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    await api.listCandidates('run 1', { page: 2, size: 25, filter: 'artifact:glint' });
    expect(calls[0]?.url).toBe(
      'http://h:1/runs/run%201/candidates?page=2&size=25&filter=artifact%3Aglint',
    );
  });

  it('posts labels as JSON with the decision and reviewer', async () => {
    const { impl, calls } = fakeFetch([{ body: { object_id: 'o1' } }]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    await api.postLabel('run-1', 'o1', 'artifact:glint', 'alice');
    expect(calls[0]).toMatchObject({
      url: 'http://h:1/runs/run-1/candidates/o1/label',
      method: 'POST',
      body: JSON.stringify({ decision: 'artifact:glint', reviewer: 'alice' }),
    });
    expect(calls[0]?.headers['Content-Type']).toBe('application/json');
  });

  it('attaches the auth token to every request when configured', async () => {
    const { impl, calls } = fakeFetch([{ body: { runs: [] } }, { body: {} }]);
    const api = new ApiClient('http://h:1', { token: 's3cret', fetchImpl: impl });
    await api.listRuns();
    await api.startRetrain('run-1', ['glint']);
    expect(calls.map((c) => c.headers['X-Auth-Token'])).toEqual(['s3cret', 's3cret']);
    expect(calls[1]?.body).toBe(JSON.stringify({ groups: ['glint'] }));
  });

  it('maps error responses to ApiError carrying status and detail', async () => {
    const { impl } = fakeFetch([{ status: 409, body: { detail: 'group too small' } }]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    const err = await api.startRetrain('run-1', ['x']).catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(409);
    expect((err as ApiError).message).toBe('group too small');
  });

  it('falls back to the status text when the error body is not JSON', async () => {
    const { impl } = fakeFetch([{ status: 500, raw: 'not json' }]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    const err = await api.listRuns().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(500);
  });
});

describe('pollJob', () => {
  const job = (status: RetrainJob['status'], extra: Partial<RetrainJob> = {}): RetrainJob => ({
    job_id: 'job-1',
    source_run_id: 'run-1',
    groups: {},
    status,
    result_run_id: null,
    error: null,
    stage: null,
    ...extra,
  });

  it('resolves once the job reports done, surfacing every update', async () => {
    const { impl } = fakeFetch([
      { body: job('queued') },
      { body: job('running', { stage: 'training' }) },
      { body: job('done', { result_run_id: 'run-2' }) },
    ]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    const seen: string[] = [];
    const final = await api.pollJob('job-1', 1, (j) => seen.push(j.status));
    expect(final.result_run_id).toBe('run-2');
    expect(seen).toEqual(['queued', 'running', 'done']);
  });

  it('rejects on failure and names the failing stage', async () => {
    const { impl } = fakeFetch([
      { body: job('failed', { stage: 'scoring', error: 'disk full' }) },
    ]);
    const api = new ApiClient('http://h:1', { fetchImpl: impl });
    await expect(api.pollJob('job-1', 1)).rejects.toThrow('disk full (stage: scoring)');
  });
});

describe('replayLabelLog', () => {
  const entry = (object_id: string, decision: string, run_id = 'run-1'): LabelEntry => ({
    object_id,
    decision,
    reviewer: 'alice',
    timestamp: '2026-01-01T00:00:00Z',
    run_id,
  });

  it('keeps the newest decision per object and clears on skip', () => {
    const state = replayLabelLog(
      [
        entry('o1', 'interesting'),
        entry('o2', 'artifact:glint'),
        entry('o1', 'artifact:glint'),
        entry('o3', 'known:eb'),
        entry('o3', 'skip'),
      ],
      'run-1',
    );
    expect(state.get('o1')).toBe('artifact:glint');
    expect(state.get('o2')).toBe('artifact:glint');
    expect(state.get('o3')).toBe('unreviewed');
  });

  it('ignores entries belonging to other runs', () => {
    const state = replayLabelLog(
      [entry('o1', 'interesting', 'run-1'), entry('o2', 'interesting', 'run-9')],
      'run-1',
    );
    expect(state.has('o2')).toBe(false);
    expect(state.size).toBe(1);
  });
});

describe('inArtifactGroup', () => {
  const cand = (triage_label: string): Candidate => ({
    object_id: 'o1',
    score: 1,
    rank: 1,
    votes: [],
    features: [],
    mask_bits: 0,
    period: null,
    band: 'blue',
    triage_label,
    run_id: 'run-1',
    ra: null,
    dec: null,
    mean_mag: null,
    snr: null,
    annotations: [],
  });

  it('matches only the exact group suffix', () => {
    expect(inArtifactGroup(cand('artifact:glint'), 'glint')).toBe(true);
    expect(inArtifactGroup(cand('artifact:glints'), 'glint')).toBe(false);
    expect(inArtifactGroup(cand('known:glint'), 'glint')).toBe(false);
    expect(inArtifactGroup(cand('unreviewed'), 'glint')).toBe(false);
  });
});
