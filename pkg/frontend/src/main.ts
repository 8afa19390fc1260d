/** DOM wiring: registration, tutorial overlay, cine canvas, box drawing,
 * submission. All decision logic lives in the tested modules (state,
 * player, boxes, tutorial, api); this file only renders and routes events.
 */

import { ApiClient, ApiError, withBackoff } from './api.js';
import { dragToBox } from './boxes.js';
import { formatFrameCounter, Player } from './player.js';
import { SessionState } from './state.js';
import { Tutorial } from './tutorial.js';
import type { TaskPayload } from './types.js';

const SCALE = 4;  // quadrant frames are small; draw them enlarged

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class App {
  private api = new ApiClient('');
  private state = new SessionState(window.localStorage);
  private tutorial: Tutorial | null = null;
  private player: Player | null = null;
  private frames: HTMLImageElement[] = [];
  private drag: { x0: number; y0: number; x1: number; y1: number } | null = null;

  private canvas = el<HTMLCanvasElement>('frame-canvas');
  private counter = el<HTMLSpanElement>('frame-counter');
  private status = el<HTMLDivElement>('status');
  private boxList = el<HTMLUListElement>('box-list');
  private labelSelect = el<HTMLSelectElement>('label-select');
  private submitBtn = el<HTMLButtonElement>('submit-btn');
  private playBtn = el<HTMLButtonElement>('play-btn');
  private seekBar = el<HTMLInputElement>('seek-bar');

  async start(): Promise<void> {
    if (!this.state.workerId) {
      try {
        this.state.setWorker(await this.api.registerWorker());
      } catch (err) {
        this.showStatus(`registration failed: ${(err as Error).message}`, 'error');
        return;
      }
    }
    el<HTMLSpanElement>('worker-id').textContent = this.state.workerId ?? '';
    this.tutorial = new Tutorial(window.localStorage, this.state.workerId!);
    this.state.tutorialCompleted = this.tutorial.completed;
    this.bindControls();
    if (!this.tutorial.completed) {
      this.showTutorial(0);
    } else {
      el<HTMLDivElement>('tutorial-overlay').hidden = true;
      await this.loadNextTask();
    }
  }

  // ------------------------------------------------------------ tutorial

  private showTutorial(index: number): void {
    const overlay = el<HTMLDivElement>('tutorial-overlay');
    overlay.hidden = false;
    const tut = this.tutorial!;
    const part = tut.part(index);
    el<HTMLHeadingElement>('tutorial-title').textContent =
      `Tutorial ${index + 1}/${tut.partCount}: ${part.title}`;
    el<HTMLParagraphElement>('tutorial-body').textContent = part.body;
    const next = el<HTMLButtonElement>('tutorial-next');
    next.textContent = index + 1 < tut.partCount ? 'Next' : 'Start annotating';
    next.onclick = async () => {
      tut.markViewed(index);
      if (index + 1 < tut.partCount) {
        this.showTutorial(index + 1);
      } else {
        this.state.tutorialCompleted = tut.completed;
        overlay.hidden = true;
        this.refreshSubmitGate();
        await this.loadNextTask();
      }
    };
  }

  // ------------------------------------------------------------- task IO

  private async loadNextTask(): Promise<void> {
    this.showStatus('fetching next task...', 'info');
    let task: TaskPayload | null;
    try {
      task = await this.api.nextTask(this.state.workerId!);
    } catch (err) {
      this.showStatus(`task fetch failed: ${(err as Error).message}`, 'error');
      return;
    }
    if (!task) {
      this.showStatus('no more tasks available. Thank you!', 'info');
      return;
    }
    this.state.loadTask(task);
    el<HTMLSpanElement>('task-id').textContent =
      `${task.task_id} (${task.segment.patient_id} ${task.segment.quadrant_id})`;
    await this.loadFrames(task);
    this.setupPlayer(task);
    this.renderBoxList();
    this.refreshSubmitGate();
    this.showStatus('watch the clip; pause to draw boxes', 'info');
  }

  private async loadFrames(task: TaskPayload): Promise<void> {
    const count = task.segment.frame_count;
    this.frames = new Array(count);
    const load = (i: number) => new Promise<HTMLImageElement>((resolve, reject) => {
      const img = new Image();
      img.onload = () => resolve(img);
      img.onerror = () => reject(new Error(`frame ${i} failed to load`));
      img.src = this.api.frameUrl(task, i);
    });
    for (let i = 0; i < count; i++) {
      try {
        this.frames[i] = await withBackoff(() => load(i));
      } catch (err) {
        this.showStatus((err as Error).message, 'error');
        throw err;
      }
    }
  }

  private setupPlayer(task: TaskPayload): void {
    this.player?.pause();
    this.player = new Player(task.segment.frame_count, task.fps);
    const { w, h } = this.state.frameSize;
    this.canvas.width = w * SCALE;
    this.canvas.height = h * SCALE;
    this.seekBar.max = String(task.segment.frame_count - 1);
    this.player.onFrame((i) => {
      if (this.player!.playing) this.state.setPlaying(i);
      else this.state.setPaused(i);
      this.renderFrame();
    });
    this.player.seek(0);
    this.state.setPaused(0);
    this.renderFrame();
  }

  // ------------------------------------------------------------ controls

  private bindControls(): void {
    this.playBtn.onclick = () => {
      const p = this.player;
      if (!p) return;
      if (p.playing) {
        this.state.setPaused(p.pause());
      } else {
        p.play();
        this.state.setPlaying(p.frameIndex);
      }
      this.renderFrame();
    };
    el<HTMLButtonElement>('step-back').onclick = () => {
      if (this.player) this.state.setPaused(this.player.stepBack());
      this.renderFrame();
    };
    el<HTMLButtonElement>('step-fwd').onclick = () => {
      if (this.player) this.state.setPaused(this.player.stepForward());
      this.renderFrame();
    };
    this.seekBar.oninput = () => {
      if (!this.player) return;
      this.player.pause();
      this.player.seek(Number(this.seekBar.value));
      this.state.setPaused(this.player.frameIndex);
      this.renderFrame();
    };

    this.canvas.onmousedown = (ev) => {
      if (!this.state.paused || !this.state.task) return;
      const pos = this.canvasPos(ev);
      this.drag = { x0: pos.x, y0: pos.y, x1: pos.x, y1: pos.y };
    };
    this.canvas.onmousemove = (ev) => {
      if (!this.drag) return;
      const pos = this.canvasPos(ev);
      this.drag.x1 = pos.x;
      this.drag.y1 = pos.y;
      this.renderFrame();
    };
    this.canvas.onmouseup = () => {
      if (!this.drag) return;
      const { x0, y0, x1, y1 } = this.drag;
      this.drag = null;
      if (Math.abs(x1 - x0) >= 2 || Math.abs(y1 - y0) >= 2) {
        const label = this.labelSelect.value === 'qc' ? 'qc' : 'nodule';
        this.state.addBox(dragToBox(x0, y0, x1, y1), label);
        this.renderBoxList();
      }
      this.renderFrame();
    };

    this.submitBtn.onclick = () => void this.submit();
    el<HTMLButtonElement>('skip-btn').onclick = () => void this.loadNextTask();
  }

  private canvasPos(ev: MouseEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: (ev.clientX - rect.left) / SCALE,
      y: (ev.clientY - rect.top) / SCALE,
    };
  }

  private async submit(): Promise<void> {
    if (!this.state.canSubmit) {
      this.showStatus('finish the tutorial first', 'error');
      return;
    }
    this.player?.pause();
    try {
      const resp = await this.api.submit(this.state.buildSubmission());
      const verdict = resp.qc_status === 'passed'
        ? 'submission accepted (QC passed)'
        : 'submission stored but failed quality review';
      this.showStatus(`${verdict} [${resp.submission_id}]`,
        resp.qc_status === 'passed' ? 'ok' : 'error');
      this.state.clearTask();
      await this.loadNextTask();
    } catch (err) {
      // show the server's rejection verbatim; never silently retry
      const msg = err instanceof ApiError ? err.message : String(err);
      this.showStatus(`rejected: ${msg}`, 'error');
    }
  }

  // ------------------------------------------------------------ rendering

  private renderFrame(): void {
    const ctx = this.canvas.getContext('2d')!;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    const img = this.frames[this.state.frameIndex];
    if (img) ctx.drawImage(img, 0, 0, this.canvas.width, this.canvas.height);

    this.counter.textContent =
      formatFrameCounter(this.state.frameIndex, this.player?.frameCount ?? 0);
    this.seekBar.value = String(this.state.frameIndex);
    this.playBtn.textContent = this.player?.playing ? 'Pause' : 'Play';

    ctx.lineWidth = 2;
    for (const ann of this.state.pending) {
      if (ann.frame_index !== this.state.frameIndex) continue;
      ctx.strokeStyle = ann.label === 'qc' ? '#3fa7ff' : '#ffd23f';
      ctx.strokeRect(ann.box.x * SCALE, ann.box.y * SCALE,
        ann.box.w * SCALE, ann.box.h * SCALE);
    }
    if (this.drag) {
      ctx.strokeStyle = '#7fff7f';
      ctx.strokeRect(
        Math.min(this.drag.x0, this.drag.x1) * SCALE,
        Math.min(this.drag.y0, this.drag.y1) * SCALE,
        Math.abs(this.drag.x1 - this.drag.x0) * SCALE,
        Math.abs(this.drag.y1 - this.drag.y0) * SCALE);
    }
  }

  private renderBoxList(): void {
    this.boxList.innerHTML = '';
    this.state.pending.forEach((ann, i) => {
      const li = document.createElement('li');
      li.textContent = `#${i + 1} ${ann.label} @ frame ${ann.frame_index + 1} `
        + `(${ann.box.x}, ${ann.box.y}, ${ann.box.w}x${ann.box.h}) `;
      const del = document.createElement('button');
      del.textContent = 'delete';
      del.onclick = () => {
        this.state.deleteBox(i);
        this.renderBoxList();
        this.renderFrame();
      };
      li.appendChild(del);
      this.boxList.appendChild(li);
    });
  }

  private refreshSubmitGate(): void {
    this.submitBtn.disabled = !this.state.canSubmit;
    this.submitBtn.title = this.state.canSubmit
      ? 'send your boxes for this video'
      : 'complete the tutorial to unlock submission';
  }

  private showStatus(message: string, kind: 'info' | 'ok' | 'error'): void {
    this.status.textContent = message;
    this.status.className = `status ${kind}`;
  }
}

window.addEventListener('DOMContentLoaded', () => {
  void new App().start();
});
