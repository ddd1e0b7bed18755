import type { ClusterSummary, Exemplar } from "./types.js";

export class ServiceError extends Error {
  constructor(message: string, readonly status?: number) {
    super(message);
    this.name = "ServiceError";
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ServiceError(detail, response.status);
  }
  return (await response.json()) as T;
}

/** Thin typed client over the review service; the only write is submitLabel. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ServiceError(`service unreachable: ${String(err)}`);
    }
    return response;
  }

  async getConfig(): Promise<Record<string, unknown>> {
    return asJson(await this.request("/api/config"));
  }

  async getClusters(): Promise<ClusterSummary[]> {
    return asJson(await this.request("/api/clusters"));
  }

  async getExemplars(clusterId: number, n = 8): Promise<Exemplar[]> {
    return asJson(
      await this.request(`/api/clusters/${clusterId}/exemplars?n=${n}`),
    );
  }

  async submitLabel(
    clusterId: number,
    name: string,
  ): Promise<{ cluster_id: number; name: string }> {
    const trimmed = name.trim();
    if (!trimmed) {
      throw new ServiceError("label must be non-empty");
    }
    return asJson(
      await this.request(`/api/clusters/${clusterId}/label`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ name: trimmed }),
      }),
    );
  }

  maskUrl(imageId: string): string {
    return `${this.baseUrl}/api/images/${encodeURIComponent(imageId)}/mask`;
  }

  overlayUrl(imageId: string, cluster?: number): string {
    const base = `${this.baseUrl}/api/images/${encodeURIComponent(imageId)}/overlay`;
    return cluster === undefined ? base : `${base}?cluster=${cluster}`;
  }
}
