/** Payload shapes of the triage service HTTP+JSON API, mirrored verbatim.
 *
 * The UI never computes scores, folds, periods, or votes — every numeric
 * field here arrives from the service and is rendered as-is.
 */

export interface RunSummary {
  run_id: string;
  candidate_count: number;
  class_names: string[];
  iteration: number;
  source_run_id: string | null;
  reviewed_count: number;
  min_artifact_group: number;
}

export interface Candidate {
  object_id: string;
  score: number;
  rank: number;
  votes: number[];
  features: (number | null)[];
  mask_bits: number;
  period: number | null;
  band: string;
  triage_label: string;
  run_id: string;
  ra: number | null;
  dec: number | null;
  mean_mag: number | null;
  snr: number | null;
  annotations: string[];
}

export interface CurveSeries {
  times: number[];
  magnitudes: number[];
  errors: number[];
}

export interface FoldedSeries {
  phases: number[];
  magnitudes: number[];
}

export interface CandidateDetail extends Candidate {
  curve: CurveSeries | null;
  folded: FoldedSeries | null;
  folded_valid: boolean;
}

export interface CandidatePage {
  run_id: string;
  page: number;
  size: number;
  total: number;
  candidates: Candidate[];
}

export interface LabelEntry {
  object_id: string;
  decision: string;
  reviewer: string;
  timestamp: string;
  run_id: string;
}

export type JobStatus = 'queued' | 'running' | 'done' | 'failed';

export interface RetrainJob {
  job_id: string;
  source_run_id: string;
  groups: Record<string, string[]>;
  status: JobStatus;
  result_run_id: string | null;
  error: string | null;
  stage: string | null;
}

/** Decisions a reviewer can record. Artifact and known decisions carry a
 * free-text suffix after the colon. */
export type Decision =
  | 'interesting'
  | 'skip'
  | `artifact:${string}`
  | `known:${string}`;
