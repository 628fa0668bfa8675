/**
 * Viewer state and its pure transitions. Sliders clamp to [-3, 3]; only the
 * first five shape and expression components get sliders, but full vectors
 * can be pasted through the advanced editor. The orbit camera lives purely
 * on the client and never participates in sample requests.
 */
import type { ModelInfo, SamplePayload, SampleRequest } from "./api.js";

export const SLIDER_MIN = -3;
export const SLIDER_MAX = 3;
export const EXPOSED_COMPONENTS = 5;

export interface OrbitCamera {
  yaw: number;
  pitch: number;
  zoom: number;
}

export interface ViewerState {
  beta: number[];
  psi: number[];
  textureSeed: number;
  camera: OrbitCamera;
  endpoint: string;
  payload: SamplePayload | null;
  requestInFlight: boolean;
  banner: string | null;
}

export function clampSlider(value: number): number {
  if (Number.isNaN(value)) return 0;
  return Math.min(SLIDER_MAX, Math.max(SLIDER_MIN, value));
}

export function initialState(info: ModelInfo, endpoint: string): ViewerState {
  return {
    beta: new Array(info.k_beta).fill(0),
    psi: new Array(info.k_psi).fill(0),
    textureSeed: 0,
    camera: { yaw: 0, pitch: 0, zoom: 1 },
    endpoint,
    payload: null,
    requestInFlight: false,
    banner: null,
  };
}

export function setSlider(
  state: ViewerState,
  group: "beta" | "psi",
  index: number,
  value: number,
): ViewerState {
  const vec = state[group];
  if (index < 0 || index >= vec.length) {
    throw new RangeError(`${group}[${index}] out of range (length ${vec.length})`);
  }
  const next = vec.slice();
  next[index] = clampSlider(value);
  return { ...state, [group]: next };
}

/** Full-vector replacement from the advanced editor; every entry clamps. */
export function setVector(
  state: ViewerState,
  group: "beta" | "psi",
  values: number[],
): ViewerState {
  if (values.length !== state[group].length) {
    throw new RangeError(
      `${group} expects ${state[group].length} values, got ${values.length}`,
    );
  }
  return { ...state, [group]: values.map(clampSlider) };
}

export function setTextureSeed(state: ViewerState, seed: number): ViewerState {
  return { ...state, textureSeed: Math.max(0, Math.floor(seed)) };
}

export function orbit(
  state: ViewerState,
  dYaw: number,
  dPitch: number,
  dZoom = 0,
): ViewerState {
  const cam = state.camera;
  return {
    ...state,
    camera: {
      yaw: cam.yaw + dYaw,
      pitch: Math.min(1.4, Math.max(-1.4, cam.pitch + dPitch)),
      zoom: Math.min(8, Math.max(0.2, cam.zoom + dZoom)),
    },
  };
}

/** The request body for the current parameter state. */
export function sampleRequest(state: ViewerState): SampleRequest {
  return {
    beta: state.beta.slice(),
    psi: state.psi.slice(),
    z_seed: state.textureSeed,
    output: "all",
  };
}

/** Atomic payload replacement; clears any error banner. */
export function applyPayload(state: ViewerState, payload: SamplePayload): ViewerState {
  return { ...state, payload, requestInFlight: false, banner: null };
}

/** Network failure: keep the last good payload, surface a banner. */
export function applyFailure(state: ViewerState, error: unknown): ViewerState {
  return {
    ...state,
    requestInFlight: false,
    banner: error instanceof Error ? error.message : String(error),
  };
}
