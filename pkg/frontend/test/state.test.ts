import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';

import { describe, expect, it } from 'vitest';

import { Player } from '../src/player.js';
import { SessionState } from '../src/state.js';
import { ManualScheduler, makeTask, MemoryStore, validateAgainstSchema } from './helpers.js';

const SCHEMA = JSON.parse(readFileSync(
  join(dirname(fileURLToPath(import.meta.url)), 'fixtures', 'api_schema.json'), 'utf-8'));

function readyState(store = new MemoryStore()): SessionState {
  const state = new SessionState(store, () => 1000);
  state.setWorker('w0001');
  state.tutorialCompleted = true;
  state.loadTask(makeTask());
  return state;
}

describe('SessionState', () => {
  it('persists the worker id across reloads', () => {
    const store = new MemoryStore();
    const s1 = new SessionState(store);
    s1.setWorker('w0042');
    const s2 = new SessionState(store);
    expect(s2.workerId).toBe('w0042');
  });

  it('only accepts boxes while paused', () => {
    const state = readyState();
    state.setPlaying(3);
    expect(() => state.addBox({ x: 1, y: 1, w: 4, h: 4 })).toThrow(/paused/);
    state.setPaused(3);
    const ann = state.addBox({ x: 1, y: 1, w: 4, h: 4 });
    expect(ann.frame_index).toBe(3);
  });

  it('clamps boxes dragged beyond the frame edge', () => {
    const state = readyState();
    state.setPaused(0);
    const ann = state.addBox({ x: 38, y: -3, w: 10, h: 5 });
    // frame is 40x36: box must fit entirely inside
    expect(ann.box.x + ann.box.w).toBeLessThanOrEqual(40);
    expect(ann.box.y).toBeGreaterThanOrEqual(0);
  });

  it('boxes can be deleted and edited before submission', () => {
    const state = readyState();
    state.addBox({ x: 1, y: 1, w: 4, h: 4 });
    state.addBox({ x: 9, y: 9, w: 4, h: 4 });
    state.deleteBox(0);
    expect(state.pending.length).toBe(1);
    expect(state.pending[0].box.x).toBe(9);
    state.updateBox(0, { x: 2, y: 3, w: 5, h: 5 });
    expect(state.pending[0].box).toEqual({ x: 2, y: 3, w: 5, h: 5 });
  });

  it('blocks submission until the tutorial is completed', () => {
    const state = readyState();
    state.tutorialCompleted = false;
    expect(state.canSubmit).toBe(false);
    expect(() => state.buildSubmission()).toThrow(/tutorial/);
    state.tutorialCompleted = true;
    expect(state.canSubmit).toBe(true);
  });

  it('draw-then-delete-then-submit sends an empty annotation list', () => {
    const state = readyState();
    state.addBox({ x: 1, y: 1, w: 4, h: 4 });
    state.deleteBox(0);
    const payload = state.buildSubmission();
    expect(payload.annotations).toEqual([]);
    expect(validateAgainstSchema(payload, SCHEMA)).toEqual([]);
  });

  it('submission payload matches the API schema fixture', () => {
    const state = readyState();
    state.setPaused(5);
    state.addBox({ x: 1, y: 2, w: 6, h: 6 }, 'nodule');
    state.setPaused(9);
    state.addBox({ x: 11, y: 12, w: 5, h: 4 }, 'qc');
    const payload = state.buildSubmission();
    expect(validateAgainstSchema(payload, SCHEMA)).toEqual([]);
    expect(payload.task_id).toBe('t0001');
    expect(payload.worker_id).toBe('w0001');
    expect(payload.annotations[0]).toEqual(
      { frame_index: 5, box: [1, 2, 6, 6], label: 'nodule' });
    expect(payload.annotations[1]).toEqual(
      { frame_index: 9, box: [11, 12, 5, 4], label: 'qc' });
  });

  it('frame accuracy: a box drawn after pausing carries the paused frame index', () => {
    // drive a real player; pause at arbitrary frames and draw
    const state = readyState();
    const sched = new ManualScheduler();
    const player = new Player(16, 3, sched);
    player.onFrame((i) => {
      if (player.playing) state.setPlaying(i);
      else state.setPaused(i);
    });
    const pauseAt = [2, 7, 11, 15];
    let cursor = 0;
    player.play();
    for (let tick = 0; tick < 15 && cursor < pauseAt.length; tick++) {
      sched.tick();
      if (player.frameIndex === pauseAt[cursor]) {
        state.setPaused(player.pause());
        state.addBox({ x: 3, y: 3, w: 5, h: 5 });
        cursor++;
        player.play();
      }
    }
    const payload = state.buildSubmission();
    expect(payload.annotations.map((a) => a.frame_index)).toEqual(pauseAt);
    expect(validateAgainstSchema(payload, SCHEMA)).toEqual([]);
  });

  it('loading a new task drops pending boxes', () => {
    const state = readyState();
    state.addBox({ x: 1, y: 1, w: 4, h: 4 });
    state.loadTask(makeTask(8));
    expect(state.pending).toEqual([]);
    expect(state.frameIndex).toBe(0);
    expect(state.paused).toBe(true);
  });
});
