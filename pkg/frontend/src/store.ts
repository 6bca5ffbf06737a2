import { ApiClient } from "./api";
import type { CommentItem, SessionUser } from "./types";

export interface Session {
  token: string;
  user: SessionUser;
}

const SESSION_KEY = "cardiokit.session";
const DISPLAY_KEY = "cardiokit.display_name";
export const POLL_MS = 5000;

/**
 * One store for the whole app. All server interaction goes through the
 * shared ApiClient; every state change lands here and is broadcast to
 * subscribers, so renders see a single consistent snapshot.
 */
export class Store {
  api: ApiClient;
  session: Session | null = null;
  /** Notifications fetched by the poll but not yet opened by the user. */
  notices: CommentItem[] = [];
  version = 0;

  private listeners = new Set<() => void>();
  private pollTimer: ReturnType<typeof setInterval> | null = null;

  constructor(api: ApiClient) {
    this.api = api;
    this.api.onUnauthorized = () => this.logout();
    const raw = localStorage.getItem(SESSION_KEY);
    if (raw) {
      try {
        this.session = JSON.parse(raw) as Session;
        this.api.token = this.session.token;
      } catch {
        localStorage.removeItem(SESSION_KEY);
      }
    }
    if (this.session?.user.role === "patient") this.startPolling();
  }

  subscribe = (fn: () => void): (() => void) => {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  };

  snapshot = (): number => this.version;

  private emit(): void {
    this.version += 1;
    for (const fn of [...this.listeners]) fn();
  }

  setSession(token: string, user: SessionUser): void {
    this.session = { token, user };
    this.api.token = token;
    localStorage.setItem(SESSION_KEY, JSON.stringify(this.session));
    if (user.role === "patient") this.startPolling();
    this.emit();
  }

  /** Drop the session and land on the login route. Also runs on any 401. */
  logout(): void {
    this.stopPolling();
    if (this.session === null && location.hash === "#/login") return;
    this.session = null;
    this.api.token = null;
    this.notices = [];
    localStorage.removeItem(SESSION_KEY);
    location.hash = "#/login";
    this.emit();
  }

  /** Local display preference only; the API has no profile mutation. */
  get displayName(): string {
    return (
      localStorage.getItem(DISPLAY_KEY) || this.session?.user.name || ""
    );
  }

  setDisplayName(name: string): void {
    if (name) localStorage.setItem(DISPLAY_KEY, name);
    else localStorage.removeItem(DISPLAY_KEY);
    this.emit();
  }

  startPolling(): void {
    if (this.pollTimer !== null) return;
    this.pollTimer = setInterval(() => {
      void this.pollOnce();
    }, POLL_MS);
  }

  stopPolling(): void {
    if (this.pollTimer !== null) clearInterval(this.pollTimer);
    this.pollTimer = null;
  }

  async pollOnce(): Promise<void> {
    if (!this.session) return;
    try {
      const fresh = await this.api.notifications();
      if (fresh.length > 0) {
        this.notices = [...this.notices, ...fresh];
        this.emit();
      }
    } catch {
      // 401 already logged us out via onUnauthorized; other errors wait
      // for the next poll
    }
  }

  takeNotices(): CommentItem[] {
    const out = this.notices;
    if (out.length > 0) {
      this.notices = [];
      this.emit();
    }
    return out;
  }
}
