import type {
  CommentItem,
  CommentKind,
  Doctor,
  LoginResponse,
  Report,
  Role,
  SessionUser,
  Study,
} from "./types";

export class ApiError extends Error {
  status: number;
  stage?: string;

  constructor(status: number, message: string, stage?: string) {
    super(message);
    this.status = status;
    this.stage = stage;
  }
}

/**
 * Thin typed client for the platform API. Holds the bearer token and
 * reports every 401 through onUnauthorized so the app can drop the
 * session and return to the login view.
 */
export class ApiClient {
  token: string | null = null;
  onUnauthorized: (() => void) | null = null;

  constructor(private base: string = "") {}

  private headers(json: boolean): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async handle(res: Response): Promise<unknown> {
    if (res.ok) {
      const type = res.headers.get("content-type") ?? "";
      return type.includes("application/json") ? res.json() : res.blob();
    }
    let message = res.statusText || `request failed (${res.status})`;
    let stage: string | undefined;
    try {
      const body = (await res.json()) as { error?: string; stage?: string };
      if (body.error) message = body.error;
      stage = body.stage;
    } catch {
      // non-JSON error body, keep the status text
    }
    if (res.status === 401 && this.onUnauthorized) this.onUnauthorized();
    throw new ApiError(res.status, message, stage);
  }

  private get(path: string): Promise<unknown> {
    return fetch(this.base + path, { headers: this.headers(false) }).then(
      (r) => this.handle(r),
    );
  }

  private send(method: string, path: string, body?: unknown): Promise<unknown> {
    return fetch(this.base + path, {
      method,
      headers: this.headers(body !== undefined),
      body: body === undefined ? undefined : JSON.stringify(body),
    }).then((r) => this.handle(r));
  }

  register(
    name: string,
    password: string,
    role: Role,
    profileLink?: string,
  ): Promise<SessionUser> {
    return this.send("POST", "/api/auth/register", {
      name,
      password,
      role,
      profile_link: profileLink,
    }) as Promise<SessionUser>;
  }

  login(name: string, password: string): Promise<LoginResponse> {
    return this.send("POST", "/api/auth/login", {
      name,
      password,
    }) as Promise<LoginResponse>;
  }

  doctors(): Promise<Doctor[]> {
    return this.get("/api/doctors") as Promise<Doctor[]>;
  }

  uploadStudy(
    file: File,
    meta: { ed_frame?: number; es_frame?: number; patient_id?: string },
  ): Promise<Study> {
    const form = new FormData();
    form.append("volume", file);
    form.append("meta", JSON.stringify(meta));
    return fetch(this.base + "/api/studies", {
      method: "POST",
      headers: this.headers(false),
      body: form,
    }).then((r) => this.handle(r)) as Promise<Study>;
  }

  listStudies(): Promise<Study[]> {
    return this.get("/api/studies") as Promise<Study[]>;
  }

  getStudy(id: string): Promise<Study> {
    return this.get(`/api/studies/${id}`) as Promise<Study>;
  }

  analyze(id: string): Promise<Report> {
    return this.send("POST", `/api/studies/${id}/analyze`) as Promise<Report>;
  }

  getReport(id: string): Promise<Report> {
    return this.get(`/api/studies/${id}/report`) as Promise<Report>;
  }

  /** Overlay PNG bytes; the caller turns them into an object URL. */
  getOverlay(id: string, name: string): Promise<Blob> {
    return this.get(`/api/studies/${id}/overlays/${name}`) as Promise<Blob>;
  }

  share(id: string, doctorId: string): Promise<Study> {
    return this.send("POST", `/api/studies/${id}/share`, {
      doctor_id: doctorId,
    }) as Promise<Study>;
  }

  revokeShare(id: string, doctorId: string): Promise<Study> {
    return this.send(
      "DELETE",
      `/api/studies/${id}/share/${doctorId}`,
    ) as Promise<Study>;
  }

  deleteStudy(id: string): Promise<{ deleted: string }> {
    return this.send("DELETE", `/api/studies/${id}`) as Promise<{
      deleted: string;
    }>;
  }

  addComment(
    studyId: string,
    body: string,
    kind: CommentKind,
  ): Promise<CommentItem> {
    return this.send("POST", `/api/reports/${studyId}/comments`, {
      body,
      kind,
    }) as Promise<CommentItem>;
  }

  listComments(studyId: string): Promise<CommentItem[]> {
    return this.get(`/api/reports/${studyId}/comments`) as Promise<
      CommentItem[]
    >;
  }

  notifications(): Promise<CommentItem[]> {
    return this.get("/api/notifications") as Promise<CommentItem[]>;
  }
}
