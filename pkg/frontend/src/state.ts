/** Session state: worker identity, the current task, pending annotations.
 *
 * Boxes can only be added while playback is paused, they are clamped to the
 * frame, and submission stays blocked until the tutorial is completed.
 * Worker id and tutorial progress persist across reloads; unsubmitted boxes
 * do not.
 */

import { clampBox } from './boxes.js';
import type { Annotation, AnnotationLabel, Box, SubmissionRequest, TaskPayload } from './types.js';

export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

const WORKER_KEY = 'lungcrowd.worker_id';

export interface PendingAnnotation {
  frame_index: number;
  box: Box;
  label: AnnotationLabel;
}

export class SessionState {
  private store: KeyValueStore;
  workerId: string | null;
  task: TaskPayload | null = null;
  paused = true;
  frameIndex = 0;
  pending: PendingAnnotation[] = [];
  tutorialCompleted = false;
  private startedAt: number;
  private now: () => number;

  constructor(store: KeyValueStore, now: () => number = () => Date.now()) {
    this.store = store;
    this.now = now;
    this.startedAt = now();
    this.workerId = store.getItem(WORKER_KEY);
  }

  setWorker(workerId: string): void {
    this.workerId = workerId;
    this.store.setItem(WORKER_KEY, workerId);
  }

  loadTask(task: TaskPayload): void {
    this.task = task;
    this.pending = [];
    this.paused = true;
    this.frameIndex = 0;
    this.startedAt = this.now();
  }

  get frameSize(): { w: number; h: number } {
    if (!this.task) throw new Error('no task loaded');
    const [, , w, h] = this.task.segment.quadrant.bbox;
    return { w, h };
  }

  setPlaying(frameIndex: number): void {
    this.paused = false;
    this.frameIndex = frameIndex;
  }

  setPaused(frameIndex: number): void {
    this.paused = true;
    this.frameIndex = frameIndex;
  }

  /** Add a box on the currently displayed (paused) frame. */
  addBox(box: Box, label: AnnotationLabel = 'nodule'): PendingAnnotation {
    if (!this.task) throw new Error('no task loaded');
    if (!this.paused) throw new Error('annotations can only be drawn while paused');
    const { w, h } = this.frameSize;
    const clamped = clampBox(box, w, h);
    const ann: PendingAnnotation = { frame_index: this.frameIndex, box: clamped, label };
    this.pending.push(ann);
    return ann;
  }

  deleteBox(index: number): void {
    if (index < 0 || index >= this.pending.length) return;
    this.pending.splice(index, 1);
  }

  updateBox(index: number, box: Box): void {
    if (index < 0 || index >= this.pending.length) return;
    const { w, h } = this.frameSize;
    this.pending[index].box = clampBox(box, w, h);
  }

  get canSubmit(): boolean {
    return this.tutorialCompleted && this.task !== null && this.workerId !== null;
  }

  buildSubmission(): SubmissionRequest {
    if (!this.task || !this.workerId) throw new Error('no task or worker');
    if (!this.tutorialCompleted) throw new Error('complete the tutorial before submitting');
    const annotations: Annotation[] = this.pending.map((p) => ({
      frame_index: p.frame_index,
      box: [p.box.x, p.box.y, p.box.w, p.box.h],
      label: p.label,
    }));
    return {
      task_id: this.task.task_id,
      worker_id: this.workerId,
      annotations,
      wall_time_ms: Math.max(0, Math.round(this.now() - this.startedAt)),
    };
  }

  clearTask(): void {
    this.task = null;
    this.pending = [];
    this.paused = true;
    this.frameIndex = 0;
  }
}
