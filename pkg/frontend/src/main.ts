import { ApiClient, ServiceError } from "./api.js";
import {
  AppState,
  confirmLabel,
  initialState,
  isUnlabeled,
  labelVocabulary,
  legendFor,
  optimisticLabel,
  rollbackLabel,
  selectImage,
  toggleCluster,
  withBanner,
  withClusters,
} from "./state.js";
import { compositeOverlay, maskPalette, thumbnailRect } from "./overlay.js";
import type { ClusterSummary, Exemplar } from "./types.js";

const api = new ApiClient("");
let state: AppState = initialState();

const els = {
  banner: document.getElementById("banner") as HTMLDivElement,
  grid: document.getElementById("cluster-grid") as HTMLDivElement,
  vocab: document.getElementById("label-vocabulary") as HTMLDataListElement,
  imageSelect: document.getElementById("image-select") as HTMLSelectElement,
  toggles: document.getElementById("cluster-toggles") as HTMLDivElement,
  legend: document.getElementById("overlay-legend") as HTMLUListElement,
  canvas: document.getElementById("overlay-canvas") as HTMLCanvasElement,
  placeholder: document.getElementById("overlay-placeholder") as HTMLDivElement,
};

function setState(next: AppState): void {
  state = next;
  render();
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

function render(): void {
  els.banner.textContent = state.banner ?? "";
  els.banner.hidden = !state.banner;
  renderVocabulary();
  renderGrid();
  renderToggles();
  renderLegend();
  void renderOverlay();
}

function renderVocabulary(): void {
  els.vocab.replaceChildren(
    ...labelVocabulary(state).map((name) => {
      const option = document.createElement("option");
      option.value = name;
      return option;
    }),
  );
}

function clusterCard(cluster: ClusterSummary): HTMLElement {
  const card = document.createElement("article");
  card.className = "cluster-card" + (isUnlabeled(cluster) ? " unlabeled" : "");
  card.dataset.clusterId = String(cluster.cluster_id);

  const title = document.createElement("h3");
  title.textContent = `#${cluster.cluster_id} ${cluster.label}`;
  if (isUnlabeled(cluster)) {
    const flag = document.createElement("span");
    flag.className = "flag";
    flag.textContent = "unlabeled";
    title.append(" ", flag);
  }
  card.append(title);

  const stats = document.createElement("p");
  stats.className = "stats";
  stats.textContent =
    `${cluster.segment_count} segments · ` +
    `mean distance ${cluster.mean_distance.toFixed(3)}`;
  card.append(stats);

  const strip = document.createElement("div");
  strip.className = "exemplars";
  card.append(strip);
  void fillExemplarStrip(strip, cluster);

  const form = document.createElement("form");
  const input = document.createElement("input");
  input.type = "text";
  input.placeholder = "concept name";
  input.setAttribute("list", "label-vocabulary");
  const error = document.createElement("span");
  error.className = "inline-error";
  const button = document.createElement("button");
  button.type = "submit";
  button.textContent = "label";
  form.append(input, button, error);
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    if (!input.value.trim()) {
      error.textContent = "name must be non-empty";
      return;
    }
    error.textContent = "";
    void submitLabel(cluster.cluster_id, input.value, error);
  });
  card.append(form);
  return card;
}

function renderGrid(): void {
  els.grid.replaceChildren(...state.clusters.map(clusterCard));
}

async function fillExemplarStrip(
  strip: HTMLDivElement,
  cluster: ClusterSummary,
): Promise<void> {
  let exemplars: Exemplar[];
  try {
    exemplars = await api.getExemplars(cluster.cluster_id, 4);
  } catch {
    exemplars = cluster.exemplars;
  }
  if (exemplars.length === 0) {
    const empty = document.createElement("span");
    empty.className = "stats";
    empty.textContent = "no segments";
    strip.replaceChildren(empty);
    return;
  }
  strip.replaceChildren(
    ...exemplars.map((ex) => exemplarThumbnail(ex, cluster.cluster_id)),
  );
}

function exemplarThumbnail(ex: Exemplar, clusterId: number): HTMLCanvasElement {
  const size = 72;
  const canvas = document.createElement("canvas");
  canvas.width = size;
  canvas.height = size;
  canvas.title = `${ex.image_id} / segment ${ex.segment_id}`;
  const img = new Image();
  img.onload = () => {
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    const bbox = ex.bbox ?? [0, 0, img.width, img.height];
    const { sx, sy, sw, sh, scale } = thumbnailRect(
      bbox,
      [img.width, img.height],
      size,
    );
    ctx.drawImage(img, sx, sy, sw, sh, 0, 0, sw * scale, sh * scale);
  };
  img.src = api.overlayUrl(ex.image_id, clusterId);
  canvas.addEventListener("click", () => {
    setState(selectImage(state, ex.image_id));
  });
  return canvas;
}

function renderToggles(): void {
  els.toggles.replaceChildren(
    ...state.clusters.map((cluster) => {
      const chip = document.createElement("button");
      chip.type = "button";
      chip.className =
        "chip" + (state.toggled.has(cluster.cluster_id) ? " on" : "");
      chip.textContent = `${cluster.cluster_id}: ${cluster.label}`;
      chip.addEventListener("click", () => {
        setState(toggleCluster(state, cluster.cluster_id));
      });
      return chip;
    }),
  );
}

function renderLegend(): void {
  const palette = maskPalette(state.clusters.length + 1);
  els.legend.replaceChildren(
    ...legendFor(state).map(({ clusterId, label }) => {
      const item = document.createElement("li");
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      const [r, g, b] = palette[clusterId + 1] ?? [0, 0, 0];
      swatch.style.backgroundColor = `rgb(${r}, ${g}, ${b})`;
      item.append(swatch, ` ${label}`);
      return item;
    }),
  );
}

async function renderOverlay(): Promise<void> {
  const imageId = state.selectedImage;
  const ctx = els.canvas.getContext("2d");
  if (!imageId || !ctx) {
    els.canvas.hidden = true;
    els.placeholder.hidden = false;
    els.placeholder.textContent = "select an exemplar or image";
    return;
  }
  let base: HTMLImageElement;
  let mask: HTMLImageElement;
  try {
    [base, mask] = await Promise.all([
      loadImage(api.overlayUrl(imageId)),
      loadImage(api.maskUrl(imageId)),
    ]);
  } catch {
    els.canvas.hidden = true;
    els.placeholder.hidden = false;
    els.placeholder.textContent = `no mask available for ${imageId}`;
    return;
  }
  els.canvas.hidden = false;
  els.placeholder.hidden = true;
  els.canvas.width = base.width;
  els.canvas.height = base.height;
  ctx.drawImage(base, 0, 0);
  if (state.toggled.size === 0) return; // toggle none -> original image

  const baseData = ctx.getImageData(0, 0, base.width, base.height);
  const maskCanvas = document.createElement("canvas");
  maskCanvas.width = mask.width;
  maskCanvas.height = mask.height;
  const maskCtx = maskCanvas.getContext("2d");
  if (!maskCtx) return;
  maskCtx.drawImage(mask, 0, 0);
  const maskRgba = maskCtx.getImageData(0, 0, mask.width, mask.height).data;
  const palette = maskPalette(state.clusters.length + 1);
  const ids = maskIdsFromRgba(maskRgba, palette);
  const blended = compositeOverlay(
    new Uint8ClampedArray(baseData.data),
    ids,
    state.toggled,
    palette,
  );
  const outData = ctx.createImageData(base.width, base.height);
  outData.data.set(blended);
  ctx.putImageData(outData, 0, 0);
}

/** Palette PNGs decode to RGB; invert the engine palette to recover ids. */
function maskIdsFromRgba(
  rgba: Uint8ClampedArray,
  palette: Record<number, [number, number, number]>,
): Uint8Array {
  const byColor = new Map<number, number>();
  for (const [id, [r, g, b]] of Object.entries(palette)) {
    byColor.set((r << 16) | (g << 8) | b, Number(id));
  }
  const ids = new Uint8Array(rgba.length / 4);
  for (let i = 0; i < ids.length; i++) {
    const key =
      ((rgba[i * 4] ?? 0) << 16) |
      ((rgba[i * 4 + 1] ?? 0) << 8) |
      (rgba[i * 4 + 2] ?? 0);
    ids[i] = byColor.get(key) ?? 0;
  }
  return ids;
}

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = `${url}${url.includes("?") ? "&" : "?"}t=${Date.now()}`;
  });
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

async function submitLabel(
  clusterId: number,
  name: string,
  errorEl: HTMLSpanElement,
): Promise<void> {
  const previous =
    state.clusters.find((c) => c.cluster_id === clusterId)?.label ?? "";
  setState(optimisticLabel(state, clusterId, name.trim()));
  try {
    const confirmed = await api.submitLabel(clusterId, name);
    setState(confirmLabel(state, clusterId, confirmed.name));
  } catch (err) {
    const reason =
      err instanceof ServiceError ? err.message : "label submission failed";
    errorEl.textContent = reason;
    setState(rollbackLabel(state, clusterId, previous, reason));
  }
}

async function refreshClusters(): Promise<void> {
  try {
    const clusters = await api.getClusters();
    const next = withClusters(state, clusters);
    if (!next.selectedImage) {
      const first = clusters.find((c) => c.exemplars.length > 0);
      next.selectedImage = first?.exemplars[0]?.image_id ?? null;
    }
    populateImageSelect(clusters);
    setState(next);
  } catch (err) {
    const reason =
      err instanceof ServiceError && err.status === undefined
        ? "service unreachable — is `endoseg serve` running?"
        : `failed to load clusters: ${String(err)}`;
    setState(withBanner(state, reason));
  }
}

function populateImageSelect(clusters: ClusterSummary[]): void {
  const ids = [
    ...new Set(
      clusters.flatMap((c) => c.exemplars.map((e) => e.image_id)),
    ),
  ].sort();
  els.imageSelect.replaceChildren(
    ...ids.map((id) => {
      const option = document.createElement("option");
      option.value = id;
      option.textContent = id;
      return option;
    }),
  );
  if (state.selectedImage) els.imageSelect.value = state.selectedImage;
}

els.imageSelect.addEventListener("change", () => {
  setState(selectImage(state, els.imageSelect.value || null));
});

void refreshClusters();
