export interface Exemplar {
  image_id: string;
  segment_id: number;
  distance: number;
  /** pixel rect (x0, y0, x1, y1), present on exemplar detail responses */
  bbox?: [number, number, number, number];
}

export interface ClusterSummary {
  cluster_id: number;
  label: string;
  segment_count: number;
  mean_distance: number;
  exemplars: Exemplar[];
}

export type Palette = Record<number, [number, number, number]>;
