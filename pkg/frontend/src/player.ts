/** Frame-accurate cine playback over an image sequence.
 *
 * Annotations are keyed to frame indices, so the player never skips or
 * blends frames: a timer advances one frame at a time at the configured
 * fps, pause freezes on an exact index, and single-frame stepping works in
 * both directions. The timer is injectable for tests.
 */

export type TimerHandle = unknown;

export interface Scheduler {
  set(cb: () => void, ms: number): TimerHandle;
  clear(handle: TimerHandle): void;
}

const realScheduler: Scheduler = {
  set: (cb, ms) => setInterval(cb, ms),
  clear: (handle) => clearInterval(handle as number),
};

export class Player {
  readonly frameCount: number;
  readonly fps: number;
  private index = 0;
  private timer: TimerHandle | null = null;
  private scheduler: Scheduler;
  private listeners: Array<(index: number) => void> = [];

  constructor(frameCount: number, fps: number, scheduler: Scheduler = realScheduler) {
    if (frameCount < 1) throw new Error('player needs at least one frame');
    if (fps <= 0) throw new Error('fps must be positive');
    this.frameCount = frameCount;
    this.fps = fps;
    this.scheduler = scheduler;
  }

  get frameIndex(): number {
    return this.index;
  }

  get playing(): boolean {
    return this.timer !== null;
  }

  onFrame(listener: (index: number) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const l of this.listeners) l(this.index);
  }

  play(): void {
    if (this.timer !== null || this.frameCount === 1) return;
    if (this.index >= this.frameCount - 1) this.seek(0);
    this.timer = this.scheduler.set(() => this.tick(), 1000 / this.fps);
  }

  private tick(): void {
    if (this.index + 1 >= this.frameCount) {
      this.pause();  // stop on the last frame
      return;
    }
    this.index += 1;
    this.emit();
    if (this.index === this.frameCount - 1) this.pause();
  }

  /** Freeze playback; returns the exact frame index frozen on. */
  pause(): number {
    if (this.timer !== null) {
      this.scheduler.clear(this.timer);
      this.timer = null;
    }
    return this.index;
  }

  seek(index: number): void {
    if (index < 0 || index >= this.frameCount) {
      throw new Error(`frame ${index} out of range [0, ${this.frameCount})`);
    }
    this.index = index;
    this.emit();
  }

  stepForward(): number {
    this.pause();
    if (this.index + 1 < this.frameCount) this.seek(this.index + 1);
    return this.index;
  }

  stepBack(): number {
    this.pause();
    if (this.index > 0) this.seek(this.index - 1);
    return this.index;
  }
}

/** The visible counter text; 1-based for humans, index + 1 exactly. */
export function formatFrameCounter(frameIndex: number, frameCount: number): string {
  return `frame ${frameIndex + 1} / ${frameCount}`;
}

/** Inverse of formatFrameCounter: the 0-based index shown by the counter. */
export function counterToIndex(text: string): number {
  const m = /^frame (\d+) \/ \d+$/.exec(text);
  if (!m) throw new Error(`unparseable frame counter: ${text}`);
  return Number(m[1]) - 1;
}
