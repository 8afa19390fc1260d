import { describe, expect, it } from 'vitest';

import { ApiClient, ApiError, withBackoff } from '../src/api.js';
import { makeTask } from './helpers.js';

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

describe('ApiClient', () => {
  it('registers a worker', async () => {
    const calls: string[] = [];
    const api = new ApiClient('', async (url) => {
      calls.push(url);
      return jsonResponse(200, { worker_id: 'w0007' });
    });
    expect(await api.registerWorker()).toBe('w0007');
    expect(calls).toEqual(['/workers']);
  });

  it('returns null when no task remains (204)', async () => {
    const api = new ApiClient('', async () => new Response(null, { status: 204 }));
    expect(await api.nextTask('w0001')).toBeNull();
  });

  it('parses the task payload and builds frame URLs', async () => {
    const task = makeTask(4);
    const api = new ApiClient('', async () => jsonResponse(200, task));
    const got = await api.nextTask('w0001');
    expect(got?.task_id).toBe('t0001');
    expect(api.frameUrl(got!, 2)).toBe('/segments/p001-left_upper/frames/2');
  });

  it('surfaces server rejections verbatim', async () => {
    const api = new ApiClient('', async () =>
      jsonResponse(409, { error: 'duplicate submission for (worker w0001, task t0001)' }));
    try {
      await api.submit({ task_id: 't0001', worker_id: 'w0001',
                         annotations: [], wall_time_ms: 0 });
      expect.unreachable();
    } catch (err) {
      expect(err).toBeInstanceOf(ApiError);
      expect((err as ApiError).status).toBe(409);
      expect((err as ApiError).message).toContain('duplicate submission');
    }
  });

  it('sends the exact submission body', async () => {
    let sent: unknown;
    const api = new ApiClient('', async (_url, init) => {
      sent = JSON.parse(String(init?.body));
      return jsonResponse(200, { submission_id: 's00001', qc_status: 'passed' });
    });
    const request = {
      task_id: 't0001', worker_id: 'w0001',
      annotations: [{ frame_index: 3, box: [1, 2, 3, 4] as [number, number, number, number],
                      label: 'nodule' as const }],
      wall_time_ms: 1234,
    };
    const resp = await api.submit(request);
    expect(sent).toEqual(request);
    expect(resp.qc_status).toBe('passed');
  });
});

describe('withBackoff', () => {
  it('retries with exponentially growing delays', async () => {
    const delays: number[] = [];
    let attempts = 0;
    const result = await withBackoff(async () => {
      attempts++;
      if (attempts < 3) throw new Error('flaky');
      return 'ok';
    }, 4, 100, async (ms) => { delays.push(ms); });
    expect(result).toBe('ok');
    expect(delays).toEqual([100, 200]);
  });

  it('gives up after the attempt budget', async () => {
    let attempts = 0;
    await expect(withBackoff(async () => {
      attempts++;
      throw new Error('down');
    }, 3, 1, async () => {})).rejects.toThrow('down');
    expect(attempts).toBe(3);
  });
});
