/** Three-part tutorial gating: every part must be paged through before the
 * submit button unlocks. Completion persists per worker across reloads.
 * All assets are static strings bundled with the app; nothing is fetched.
 */

import type { KeyValueStore } from './state.js';

export interface TutorialPart {
  title: string;
  body: string;
}

export const TUTORIAL_PARTS: TutorialPart[] = [
  {
    title: 'What nodules look like',
    body: 'You will watch short grayscale videos sweeping through a lung. '
      + 'Nodules appear as small bright roundish blobs that stay compact from '
      + 'frame to frame, unlike vessels, which stretch into bright branching '
      + 'lines. They can sit at the lung edge, against vessels, or float in '
      + 'the dark lung interior. Examples, small to large: a faint dot a few '
      + 'pixels wide, a pea-sized disc, and a large bright mass.',
  },
  {
    title: 'Using the annotation tool',
    body: 'Press play to watch the clip; use pause and the single-frame '
      + 'step buttons to examine anything suspicious. While paused, click '
      + 'and drag on the image to draw a box around a suspected nodule. '
      + 'Boxes can be deleted from the list before you submit. The frame '
      + 'counter shows exactly which frame you are annotating.',
  },
  {
    title: 'How your work is reviewed',
    body: 'Each video also contains one small hidden picture of an animal. '
      + 'Draw a box around it when you spot it, exactly like a nodule, and '
      + 'pick the "qc" label. Submissions that miss it are rejected and '
      + 'unpaid, so keep watching attentively. Videos may contain no '
      + 'nodules at all, or several.',
  },
];

const KEY_PREFIX = 'lungcrowd.tutorial.';

export class Tutorial {
  private store: KeyValueStore;
  private workerId: string;
  private viewed: Set<number>;

  constructor(store: KeyValueStore, workerId: string) {
    this.store = store;
    this.workerId = workerId;
    this.viewed = new Set();
    if (store.getItem(KEY_PREFIX + workerId) === 'done') {
      for (let i = 0; i < TUTORIAL_PARTS.length; i++) this.viewed.add(i);
    }
  }

  get partCount(): number {
    return TUTORIAL_PARTS.length;
  }

  part(index: number): TutorialPart {
    return TUTORIAL_PARTS[index];
  }

  markViewed(index: number): void {
    if (index < 0 || index >= TUTORIAL_PARTS.length) return;
    this.viewed.add(index);
    if (this.completed) {
      this.store.setItem(KEY_PREFIX + this.workerId, 'done');
    }
  }

  viewedPart(index: number): boolean {
    return this.viewed.has(index);
  }

  /** True only when all three parts have been paged through. */
  get completed(): boolean {
    return this.viewed.size === TUTORIAL_PARTS.length;
  }
}
