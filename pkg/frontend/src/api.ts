/** Typed client for the conrf inference service. */

export type StyleSource = {
  text?: string
  image_b64?: string
  image_id?: string
  stats?: { mu: number[]; sigma: number[] }
}

export type PoseSpec = {
  view?: number
  c2w?: number[][]
  focal?: number
  width?: number
  height?: number
  near?: number
  far?: number
}

export type RenderRequest = {
  pose: PoseSpec
  style: StyleSource
  style2?: StyleSource
  content_text?: string
  threshold?: number
  resolution?: number
  checkpoint?: string
}

export type RenderResponse = {
  image_b64: string
  mask_b64: string | null
  width: number
  height: number
  timings: Record<string, number>
  checkpoint_id: string
}

export type CheckpointInfo = {
  id: string
  stage: string
  step: number
  supports_selection: boolean
}

export type ViewInfo = { index: number; split: string; width: number; height: number }

export class ApiError extends Error {
  constructor(public status: number, public body: unknown) {
    super(`service error ${status}: ${JSON.stringify(body)}`)
  }
}

async function asJson<T>(res: Response): Promise<T> {
  const body = await res.json().catch(() => ({}))
  if (!res.ok) throw new ApiError(res.status, body)
  return body as T
}

export class ApiClient {
  constructor(public baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path
  }

  async health(): Promise<{ status: string }> {
    return asJson(await fetch(this.url("/healthz")))
  }

  async checkpoints(): Promise<CheckpointInfo[]> {
    const body = await asJson<{ checkpoints: CheckpointInfo[] }>(
      await fetch(this.url("/checkpoints")))
    return body.checkpoints
  }

  async views(dataset: string): Promise<ViewInfo[]> {
    const body = await asJson<{ views: ViewInfo[] }>(
      await fetch(this.url(`/views/${dataset}`)))
    return body.views
  }

  async renderRequestSchema(): Promise<Record<string, unknown>> {
    return asJson(await fetch(this.url("/schema/render-request")))
  }

  async uploadStyle(imageB64: string): Promise<string> {
    const body = await asJson<{ id: string }>(await fetch(this.url("/styles"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image_b64: imageB64 }),
    }))
    return body.id
  }

  async render(req: RenderRequest, signal?: AbortSignal): Promise<RenderResponse> {
    return asJson(await fetch(this.url("/render"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
      signal,
    }))
  }
}
