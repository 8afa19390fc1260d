/** Thin typed client for the task service HTTP API. */

import type { SubmissionRequest, SubmissionResponse, TaskPayload } from './types.js';

export type FetchFn = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

async function errorOf(resp: Response): Promise<ApiError> {
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.error === 'string') message = body.error;
  } catch {
    // keep the generic message
  }
  return new ApiError(resp.status, message);
}

export class ApiClient {
  private fetchFn: FetchFn;
  private base: string;

  constructor(base = '', fetchFn: FetchFn = (u, i) => fetch(u, i)) {
    this.base = base.replace(/\/$/, '');
    this.fetchFn = fetchFn;
  }

  async registerWorker(): Promise<string> {
    const resp = await this.fetchFn(`${this.base}/workers`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: '{}',
    });
    if (!resp.ok) throw await errorOf(resp);
    const body = await resp.json();
    return body.worker_id as string;
  }

  /** Next open task for the worker, or null when none remain. */
  async nextTask(workerId: string): Promise<TaskPayload | null> {
    const resp = await this.fetchFn(
      `${this.base}/tasks/next?worker=${encodeURIComponent(workerId)}`);
    if (resp.status === 204) return null;
    if (!resp.ok) throw await errorOf(resp);
    return await resp.json() as TaskPayload;
  }

  frameUrl(task: TaskPayload, frameIndex: number): string {
    return this.base + task.frame_url_template.replace('{n}', String(frameIndex));
  }

  /** Submit once; the server rejects duplicates, so no silent retries. */
  async submit(request: SubmissionRequest): Promise<SubmissionResponse> {
    const resp = await this.fetchFn(`${this.base}/submissions`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(request),
    });
    if (!resp.ok) throw await errorOf(resp);
    return await resp.json() as SubmissionResponse;
  }
}

/** Retry an action with exponential backoff (for frame fetches only). */
export async function withBackoff<T>(
  action: () => Promise<T>, attempts = 4, baseDelayMs = 200,
  sleep: (ms: number) => Promise<void> = (ms) => new Promise((r) => setTimeout(r, ms)),
): Promise<T> {
  let lastError: unknown;
  for (let i = 0; i < attempts; i++) {
    try {
      return await action();
    } catch (err) {
      lastError = err;
      if (i + 1 < attempts) await sleep(baseDelayMs * 2 ** i);
    }
  }
  throw lastError;
}
