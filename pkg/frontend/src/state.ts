import type { ClusterSummary } from "./types.js";

/**
 * UI state is a pure projection of service responses plus local toggle
 * state; every transition returns a new value so a refresh reproduces the
 * view from scratch.
 */
export interface AppState {
  clusters: ClusterSummary[];
  selectedImage: string | null;
  toggled: ReadonlySet<number>;
  banner: string | null;
  /** optimistic label text per cluster, pending server confirmation */
  pending: ReadonlyMap<number, string>;
}

export function initialState(): AppState {
  return {
    clusters: [],
    selectedImage: null,
    toggled: new Set(),
    banner: null,
    pending: new Map(),
  };
}

const DEFAULT_LABEL = /^cluster-\d+$/;

export function isUnlabeled(cluster: ClusterSummary): boolean {
  return DEFAULT_LABEL.test(cluster.label);
}

export function withClusters(
  state: AppState,
  clusters: ClusterSummary[],
): AppState {
  const ids = new Set(clusters.map((c) => c.cluster_id));
  const toggled = new Set([...state.toggled].filter((id) => ids.has(id)));
  return { ...state, clusters: [...clusters], toggled, banner: null };
}

export function withBanner(state: AppState, message: string): AppState {
  return { ...state, banner: message };
}

export function selectImage(state: AppState, imageId: string | null): AppState {
  return { ...state, selectedImage: imageId };
}

export function toggleCluster(state: AppState, clusterId: number): AppState {
  const toggled = new Set(state.toggled);
  if (toggled.has(clusterId)) {
    toggled.delete(clusterId);
  } else {
    toggled.add(clusterId);
  }
  return { ...state, toggled };
}

function relabel(
  clusters: ClusterSummary[],
  clusterId: number,
  name: string,
): ClusterSummary[] {
  return clusters.map((c) =>
    c.cluster_id === clusterId ? { ...c, label: name } : c,
  );
}

/** Apply the label locally before the POST resolves. */
export function optimisticLabel(
  state: AppState,
  clusterId: number,
  name: string,
): AppState {
  const pending = new Map(state.pending);
  pending.set(clusterId, name);
  return { ...state, pending, clusters: relabel(state.clusters, clusterId, name) };
}

/** Server confirmed: drop the pending marker, keep the server's spelling. */
export function confirmLabel(
  state: AppState,
  clusterId: number,
  name: string,
): AppState {
  const pending = new Map(state.pending);
  pending.delete(clusterId);
  return { ...state, pending, clusters: relabel(state.clusters, clusterId, name) };
}

/** Server rejected: restore the previous label and surface the reason. */
export function rollbackLabel(
  state: AppState,
  clusterId: number,
  previous: string,
  reason: string,
): AppState {
  const pending = new Map(state.pending);
  pending.delete(clusterId);
  return {
    ...state,
    pending,
    banner: reason,
    clusters: relabel(state.clusters, clusterId, previous),
  };
}

/** Autocomplete vocabulary: every human-assigned label, deduplicated. */
export function labelVocabulary(state: AppState): string[] {
  const names = state.clusters
    .filter((c) => !isUnlabeled(c))
    .map((c) => c.label);
  return [...new Set(names)].sort();
}

/** Legend rows for the currently toggled clusters. */
export function legendFor(
  state: AppState,
): { clusterId: number; label: string }[] {
  return state.clusters
    .filter((c) => state.toggled.has(c.cluster_id))
    .map((c) => ({ clusterId: c.cluster_id, label: c.label }));
}
