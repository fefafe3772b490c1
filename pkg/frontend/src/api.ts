import type {
  Candidate,
  CandidateDetail,
  CandidatePage,
  Decision,
  LabelEntry,
  RetrainJob,
  RunSummary,
} from './types.js';

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = 'ApiError';
  }
}

export interface ListCandidatesOptions {
  page?: number;
  size?: number;
  filter?: string;
}

/** The slice of the service API the review queue depends on; the real
 * HTTP client and test stubs both implement it. */
export interface TriageApi {
  listRuns(): Promise<RunSummary[]>;
  listCandidates(runId: string, opts?: ListCandidatesOptions): Promise<CandidatePage>;
  getCandidate(runId: string, objectId: string): Promise<CandidateDetail>;
  postLabel(runId: string, objectId: string, decision: Decision, reviewer: string): Promise<LabelEntry>;
  startRetrain(runId: string, groups: string[]): Promise<RetrainJob>;
  getJob(jobId: string): Promise<RetrainJob>;
}

export interface ApiClientOptions {
  token?: string;
  fetchImpl?: typeof fetch;
}

export class ApiClient implements TriageApi {
  private readonly fetchImpl: typeof fetch;
  private readonly token?: string;

  constructor(
    private readonly baseUrl: string,
    opts: ApiClientOptions = {},
  ) {
    this.fetchImpl = opts.fetchImpl ?? fetch;
    this.token = opts.token;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers['Content-Type'] = 'application/json';
    if (this.token !== undefined) headers['X-Auth-Token'] = this.token;
    const res = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const doc = (await res.json()) as { detail?: string };
        if (doc.detail) detail = doc.detail;
      } catch {
        // keep the status text when the error body is not JSON
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  async listRuns(): Promise<RunSummary[]> {
    const doc = await this.request<{ runs: RunSummary[] }>('GET', '/runs');
    return doc.runs;
  }

  listCandidates(runId: string, opts: ListCandidatesOptions = {}): Promise<CandidatePage> {
    const params = new URLSearchParams();
    if (opts.page !== undefined) params.set('page', String(opts.page));
    if (opts.size !== undefined) params.set('size', String(opts.size));
    if (opts.filter !== undefined) params.set('filter', opts.filter);
    const query = params.size > 0 ? `?${params.toString()}` : '';
    return this.request('GET', `/runs/${encodeURIComponent(runId)}/candidates${query}`);
  }

  getCandidate(runId: string, objectId: string): Promise<CandidateDetail> {
    return this.request(
      'GET',
      `/runs/${encodeURIComponent(runId)}/candidates/${encodeURIComponent(objectId)}`,
    );
  }

  postLabel(
    runId: string,
    objectId: string,
    decision: Decision,
    reviewer: string,
  ): Promise<LabelEntry> {
    return this.request(
      'POST',
      `/runs/${encodeURIComponent(runId)}/candidates/${encodeURIComponent(objectId)}/label`,
      { decision, reviewer },
    );
  }

  startRetrain(runId: string, groups: string[]): Promise<RetrainJob> {
    return this.request('POST', `/runs/${encodeURIComponent(runId)}/retrain`, { groups });
  }

  getJob(jobId: string): Promise<RetrainJob> {
    return this.request('GET', `/jobs/${encodeURIComponent(jobId)}`);
  }

  /** Poll a retrain job until it reaches a terminal state. Resolves on
   * `done`, rejects on `failed` (with the failing stage when the service
   * reports one). `onUpdate` fires on every poll so a banner can track
   * queued → running. */
  pollJob(
    jobId: string,
    intervalMs = 1500,
    onUpdate?: (job: RetrainJob) => void,
  ): Promise<RetrainJob> {
    return new Promise((resolve, reject) => {
      const tick = async () => {
        let job: RetrainJob;
        try {
          job = await this.getJob(jobId);
        } catch (err) {
          clearInterval(timer);
          reject(err);
          return;
        }
        onUpdate?.(job);
        if (job.status === 'done') {
          clearInterval(timer);
          resolve(job);
        } else if (job.status === 'failed') {
          clearInterval(timer);
          const stage = job.stage ? ` (stage: ${job.stage})` : '';
          reject(new Error(`${job.error ?? 'retrain job failed'}${stage}`));
        }
      };
      const timer = setInterval(tick, intervalMs);
      void tick();
    });
  }
}

/** Newest-wins replay of a label log; `skip` clears back to unreviewed.
 * Mirrors the service's own replay so the UI can verify that what it
 * shows equals the persisted log. */
export function replayLabelLog(entries: LabelEntry[], runId: string): Map<string, string> {
  const state = new Map<string, string>();
  for (const entry of entries) {
    if (entry.run_id !== runId) continue;
    if (entry.decision === 'skip') state.set(entry.object_id, 'unreviewed');
    else state.set(entry.object_id, entry.decision);
  }
  return state;
}

/** True when a candidate's current label belongs to the named artifact
 * group. */
export function inArtifactGroup(candidate: Candidate, group: string): boolean {
  return candidate.triage_label === `artifact:${group}`;
}
