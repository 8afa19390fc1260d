import type { KeyValueStore } from '../src/state.js';
import type { TaskPayload } from '../src/types.js';
import type { Scheduler, TimerHandle } from '../src/player.js';

export class MemoryStore implements KeyValueStore {
  private map = new Map<string, string>();

  getItem(key: string): string | null {
    return this.map.has(key) ? this.map.get(key)! : null;
  }

  setItem(key: string, value: string): void {
    this.map.set(key, value);
  }
}

/** Deterministic scheduler driven by explicit tick() calls. */
export class ManualScheduler implements Scheduler {
  private callbacks = new Map<number, () => void>();
  private nextId = 1;
  lastIntervalMs: number | null = null;

  set(cb: () => void, ms: number): TimerHandle {
    this.lastIntervalMs = ms;
    const id = this.nextId++;
    this.callbacks.set(id, cb);
    return id;
  }

  clear(handle: TimerHandle): void {
    this.callbacks.delete(handle as number);
  }

  tick(times = 1): void {
    for (let i = 0; i < times; i++) {
      for (const cb of [...this.callbacks.values()]) cb();
    }
  }

  get active(): boolean {
    return this.callbacks.size > 0;
  }
}

export function makeTask(frameCount = 16, size: [number, number] = [40, 36]): TaskPayload {
  const frames = [];
  for (let i = 0; i < frameCount; i++) {
    frames.push({
      kind: (i % 3 === 0 ? 'keyframe' : 'interpolated') as 'keyframe' | 'interpolated',
      slab_index: Math.floor(i / 3),
      file: `f${String(i).padStart(5, '0')}.png`,
    });
  }
  return {
    task_id: 't0001',
    segment_id: 'p001-left_upper',
    segment: {
      segment_id: 'p001-left_upper',
      patient_id: 'p001',
      quadrant_id: 'left_upper',
      fps: 3,
      frame_count: frameCount,
      frames,
      quadrant: { slice_range: [0, 9], bbox: [4, 6, size[0], size[1]] },
      thin: false,
    },
    frame_url_template: '/segments/p001-left_upper/frames/{n}',
    fps: 3,
  };
}

/** Minimal draft-07 subset validator, enough for the fixture schema. */
export function validateAgainstSchema(value: unknown, schema: any, path = '$'): string[] {
  const errors: string[] = [];
  const fail = (msg: string) => errors.push(`${path}: ${msg}`);

  if (schema.enum) {
    if (!schema.enum.includes(value)) fail(`${JSON.stringify(value)} not in ${JSON.stringify(schema.enum)}`);
    return errors;
  }
  switch (schema.type) {
    case 'object': {
      if (typeof value !== 'object' || value === null || Array.isArray(value)) {
        fail('expected object');
        return errors;
      }
      const obj = value as Record<string, unknown>;
      for (const key of schema.required ?? []) {
        if (!(key in obj)) fail(`missing required property ${key}`);
      }
      for (const [key, sub] of Object.entries(schema.properties ?? {})) {
        if (key in obj) errors.push(...validateAgainstSchema(obj[key], sub, `${path}.${key}`));
      }
      if (schema.additionalProperties === false) {
        for (const key of Object.keys(obj)) {
          if (!(key in (schema.properties ?? {}))) fail(`unexpected property ${key}`);
        }
      }
      return errors;
    }
    case 'array': {
      if (!Array.isArray(value)) {
        fail('expected array');
        return errors;
      }
      if (schema.minItems !== undefined && value.length < schema.minItems) fail('too few items');
      if (schema.maxItems !== undefined && value.length > schema.maxItems) fail('too many items');
      if (schema.items) {
        value.forEach((v, i) => errors.push(...validateAgainstSchema(v, schema.items, `${path}[${i}]`)));
      }
      return errors;
    }
    case 'string': {
      if (typeof value !== 'string') fail('expected string');
      else if (schema.minLength !== undefined && value.length < schema.minLength) fail('too short');
      return errors;
    }
    case 'integer': {
      if (typeof value !== 'number' || !Number.isInteger(value)) fail('expected integer');
      else if (schema.minimum !== undefined && value < schema.minimum) fail(`below minimum ${schema.minimum}`);
      return errors;
    }
    default:
      fail(`unhandled schema type ${schema.type}`);
      return errors;
  }
}
