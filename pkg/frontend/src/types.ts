/** Shared types mirroring the task service HTTP API. */

export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export type AnnotationLabel = 'nodule' | 'qc';

export interface Annotation {
  frame_index: number;
  box: [number, number, number, number];
  label: AnnotationLabel;
}

export interface FrameKind {
  kind: 'keyframe' | 'interpolated';
  slab_index: number;
  fraction?: number;
  file: string;
}

/** The segment manifest as served to workers (QC marker withheld). */
export interface SegmentManifest {
  segment_id: string;
  patient_id: string;
  quadrant_id: string;
  fps: number;
  frame_count: number;
  frames: FrameKind[];
  quadrant: { slice_range: [number, number]; bbox: [number, number, number, number] };
  thin: boolean;
}

export interface TaskPayload {
  task_id: string;
  segment_id: string;
  segment: SegmentManifest;
  frame_url_template: string;
  fps: number;
}

export interface SubmissionRequest {
  task_id: string;
  worker_id: string;
  annotations: Annotation[];
  wall_time_ms: number;
}

export interface SubmissionResponse {
  submission_id: string;
  qc_status: 'passed' | 'failed';
}
