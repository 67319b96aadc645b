/** Wire types shared with the detection service. */

export type RecordMode = "record_only" | "record_and_detect" | "record_on_detection";

export const RECORD_MODES: readonly RecordMode[] = [
  "record_only",
  "record_and_detect",
  "record_on_detection",
];

export interface DetectionFrame {
  type: "detection";
  window_start_s: number;
  stage1_score: number;
  mosquito_present: boolean;
  species?: string;
  votes?: Record<string, number>;
  /** 16 log mel band energies; feeds the rolling spectrogram strip. */
  bands?: number[];
}

export interface ErrorFrame {
  type: "error";
  code: string;
  message: string;
}

export interface ClosedFrame {
  type: "closed";
}

export type ServerFrame = DetectionFrame | ErrorFrame | ClosedFrame;

export interface MetadataSubmission {
  species_category: string | null;
  environment_notes: string;
}

export interface RecordingRow {
  id: string;
  session_id: string;
  duration_s: number;
  sample_rate: number;
  created_at: string;
  species_category: string | null;
  detected: boolean;
}
