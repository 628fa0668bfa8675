import { readFileSync } from "node:fs";

import { describe, expect, it } from "vitest";

import { meshToObj, g17 } from "../src/obj.js";
import {
  applyPayload,
  clampSlider,
  initialState,
  sampleRequest,
  setSlider,
  setVector,
} from "../src/state.js";
import {
  fixturePath,
  modelInfo,
  sampleBetaEdit,
  sampleZero,
  sampleZseedEdit,
} from "./helpers.js";

describe("slider state", () => {
  it("clamps to [-3, 3]", () => {
    expect(clampSlider(-7)).toBe(-3);
    expect(clampSlider(9)).toBe(3);
    expect(clampSlider(1.25)).toBe(1.25);
    const s = setSlider(initialState(modelInfo(), ""), "beta", 0, 100);
    expect(s.beta[0]).toBe(3);
  });

  it("rejects out-of-range component indices", () => {
    const s = initialState(modelInfo(), "");
    expect(() => setSlider(s, "beta", 99, 0)).toThrow(RangeError);
    expect(() => setVector(s, "psi", [1, 2, 3])).toThrow(RangeError);
  });

  it("zero state requests zero vectors", () => {
    const req = sampleRequest(initialState(modelInfo(), ""));
    expect(req.beta).toEqual(new Array(modelInfo().k_beta).fill(0));
    expect(req.psi).toEqual(new Array(modelInfo().k_psi).fill(0));
    expect(req.z_seed).toBe(0);
    expect(req.output).toBe("all");
  });

  it("applying a payload replaces it atomically and clears the banner", () => {
    let s = initialState(modelInfo(), "");
    s = { ...s, banner: "stale error", requestInFlight: true };
    s = applyPayload(s, sampleZero());
    expect(s.payload).toEqual(sampleZero());
    expect(s.banner).toBeNull();
    expect(s.requestInFlight).toBe(false);
  });
});

describe("service contract (recorded responses)", () => {
  it("zero-slider mesh serializes byte-identically to the CLI sample", () => {
    const obj = meshToObj(sampleZero().mesh!);
    const cli = readFileSync(fixturePath("cli_zero_mesh.obj"), "utf8");
    expect(obj).toBe(cli);
  });

  it("a shape edit leaves the texture payload unchanged", () => {
    expect(sampleBetaEdit().texture_png).toBe(sampleZero().texture_png);
    expect(sampleBetaEdit().mesh!.vertices).not.toEqual(sampleZero().mesh!.vertices);
  });

  it("a texture-seed edit leaves the vertex payload unchanged", () => {
    expect(sampleZseedEdit().mesh!.vertices).toEqual(sampleZero().mesh!.vertices);
    expect(sampleZseedEdit().texture_png).not.toBe(sampleZero().texture_png);
  });

  it("face list and UVs are shared across all recorded samples", () => {
    for (const payload of [sampleBetaEdit(), sampleZseedEdit()]) {
      expect(payload.mesh!.faces).toEqual(sampleZero().mesh!.faces);
      expect(payload.mesh!.uvs).toEqual(sampleZero().mesh!.uvs);
    }
  });
});

describe("printf %.17g formatting", () => {
  it("matches known renderings", () => {
    expect(g17(0)).toBe("0");
    expect(g17(0.5)).toBe("0.5");
    expect(g17(-1)).toBe("-1");
    expect(g17(1 / 3)).toBe("0.33333333333333331");
    expect(g17(-8.9131897632720863e-6)).toBe("-8.9131897632720863e-06");
    expect(g17(1e20)).toBe("1e+20");
  });
});
