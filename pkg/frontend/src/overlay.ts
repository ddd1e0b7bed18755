import type { Palette } from "./types.js";

/** Deterministic id -> color palette matching the engine's mask palette. */
export function maskPalette(nIds: number): Palette {
  const palette: Palette = { 0: [0, 0, 0] };
  for (let i = 1; i < nIds; i++) {
    const hue = (i * 0.6180339887498949) % 1.0;
    palette[i] = hsvToRgb(hue, 0.65, 0.95);
  }
  return palette;
}

function hsvToRgb(h: number, s: number, v: number): [number, number, number] {
  const sector = Math.floor(h * 6);
  const f = h * 6 - sector;
  const p = v * (1 - s);
  const q = v * (1 - f * s);
  const t = v * (1 - (1 - f) * s);
  const pick: [number, number, number][] = [
    [v, t, p],
    [q, v, p],
    [p, v, t],
    [p, q, v],
    [t, p, v],
    [v, p, q],
  ];
  const rgb = pick[((sector % 6) + 6) % 6] ?? [v, v, v];
  return [
    Math.round(rgb[0] * 255),
    Math.round(rgb[1] * 255),
    Math.round(rgb[2] * 255),
  ];
}

/**
 * Tint the toggled clusters' pixels over the base image.
 *
 * `base` is RGBA pixel data; `maskIds` holds one mask id per pixel, where
 * mask id 0 is background and mask id c+1 means cluster c.  Pixels of
 * untoggled clusters pass through untouched, so toggling nothing returns
 * the original image.
 */
export function compositeOverlay(
  base: Uint8ClampedArray,
  maskIds: ArrayLike<number>,
  toggled: ReadonlySet<number>,
  palette: Palette,
  alpha = 0.55,
): Uint8ClampedArray {
  if (base.length !== maskIds.length * 4) {
    throw new Error(
      `pixel count mismatch: ${base.length / 4} rgba vs ${maskIds.length} mask`,
    );
  }
  const out = new Uint8ClampedArray(base);
  for (let i = 0; i < maskIds.length; i++) {
    const maskId = Number(maskIds[i]);
    if (maskId <= 0 || !toggled.has(maskId - 1)) continue;
    const tint = palette[maskId];
    if (!tint) continue;
    const o = i * 4;
    out[o] = Math.round((1 - alpha) * (base[o] ?? 0) + alpha * tint[0]);
    out[o + 1] = Math.round((1 - alpha) * (base[o + 1] ?? 0) + alpha * tint[1]);
    out[o + 2] = Math.round((1 - alpha) * (base[o + 2] ?? 0) + alpha * tint[2]);
  }
  return out;
}

/** Clamp a segment bbox to the image and scale it into a square thumbnail. */
export function thumbnailRect(
  bbox: [number, number, number, number],
  imageSize: [number, number],
  canvasSize: number,
): { sx: number; sy: number; sw: number; sh: number; scale: number } {
  const [width, height] = imageSize;
  const clamp = (v: number, hi: number) => Math.min(Math.max(v, 0), hi);
  const sx = clamp(bbox[0], width);
  const sy = clamp(bbox[1], height);
  const sw = Math.max(1, clamp(bbox[2], width) - sx);
  const sh = Math.max(1, clamp(bbox[3], height) - sy);
  return { sx, sy, sw, sh, scale: canvasSize / Math.max(sw, sh) };
}
