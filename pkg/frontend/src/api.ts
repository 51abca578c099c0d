/**
 * Typed client for the control server. The portal talks to the documented
 * routes only; config and result payloads travel as verbatim strings.
 */

export interface ProtocolEntry {
  id: number;
  names: Record<string, string>;
  display_name: string;
  description: Record<string, string>;
  config_schema: ConfigSchema | null;
  ui_plugin: string | null;
}

export interface CatalogEntry {
  id: number;
  names: Record<string, string>;
  display_name: string;
  description: Record<string, string>;
  location: string;
  liveness: "ONLINE" | "OFFLINE" | "NEVER_SEEN";
  stream_url: string | null;
  protocols: ProtocolEntry[];
}

export interface ConfigSchema {
  type?: string;
  properties?: Record<string, PropertySchema>;
}

export interface PropertySchema {
  type: string;
  default?: number;
  minimum?: number;
  maximum?: number;
  multipleOf?: number;
}

export interface ExecutionInfo {
  id: number;
  owner_id: number;
  apparatus_id: number;
  protocol_id: number;
  config_payload: string;
  status: string;
  created_at: string | null;
  submitted_at: string | null;
  started_at: string | null;
  finished_at: string | null;
}

export interface ResultRow {
  execution_id: number;
  seq: number;
  kind: "PARTIAL" | "FINAL";
  payload: string;
  received_at: string;
}

export interface Me {
  id: number;
  username: string;
  display_name: string;
  role: string;
  provider: string;
}

export interface FieldIssue {
  field: string;
  message: string;
}

/** Raised for 422 responses so the form can render per-field errors. */
export class ValidationError extends Error {
  constructor(public issues: FieldIssue[]) {
    super(issues.map((i) => `${i.field} ${i.message}`).join("; "));
  }
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

type Fetcher = (input: string, init?: RequestInit) => Promise<Response>;

export class PortalApi {
  constructor(private fetcher: Fetcher = (url, init) => fetch(url, init)) {}

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method, credentials: "same-origin" };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetcher(path, init);
    if (response.ok) return response;
    let code = "error";
    let message = response.statusText;
    let issues: FieldIssue[] | undefined;
    try {
      const parsed = await response.json();
      code = parsed.code ?? code;
      message = parsed.message ?? message;
      issues = parsed.errors;
    } catch {
      // non-JSON error body; keep the status text
    }
    if (response.status === 422 && issues) throw new ValidationError(issues);
    throw new ApiError(response.status, code, message);
  }

  async login(username: string, password: string): Promise<Me> {
    const response = await this.request("POST", "/login", { username, password });
    return (await response.json()).principal as Me;
  }

  async logout(): Promise<void> {
    await this.request("POST", "/logout");
  }

  async me(): Promise<Me | null> {
    try {
      return (await (await this.request("GET", "/me")).json()) as Me;
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) return null;
      throw err;
    }
  }

  async providers(): Promise<string[]> {
    return (await (await this.request("GET", "/providers")).json()).providers;
  }

  async providerLogin(providerId: string, assertion: string): Promise<Me> {
    const response = await this.request("POST", `/auth/${providerId}`, { assertion });
    return (await response.json()).principal as Me;
  }

  async catalog(): Promise<CatalogEntry[]> {
    return (await (await this.request("GET", "/apparatus")).json()) as CatalogEntry[];
  }

  async createExecution(
    apparatusId: number,
    protocolId: number,
    config: string,
  ): Promise<ExecutionInfo> {
    const response = await this.request("POST", "/execution", {
      apparatus_id: apparatusId,
      protocol_id: protocolId,
      config,
    });
    return (await response.json()) as ExecutionInfo;
  }

  async updateExecution(executionId: number, config: string): Promise<ExecutionInfo> {
    const response = await this.request("PUT", `/execution/${executionId}`, { config });
    return (await response.json()) as ExecutionInfo;
  }

  async start(executionId: number): Promise<ExecutionInfo> {
    const response = await this.request("PUT", `/execution/${executionId}/start`);
    return (await response.json()) as ExecutionInfo;
  }

  async status(executionId: number): Promise<string> {
    return (await (await this.request("GET", `/execution/${executionId}/status`)).json())
      .status as string;
  }

  async resultsAfter(executionId: number, lastSeq: number): Promise<ResultRow[]> {
    const response = await this.request(
      "GET",
      `/execution/${executionId}/result/${lastSeq}`,
    );
    return (await response.json()) as ResultRow[];
  }

  csvUrl(executionId: number): string {
    return `/execution/${executionId}/results.csv`;
  }

  async downloadCsv(executionId: number): Promise<string> {
    return await (await this.request("GET", this.csvUrl(executionId))).text();
  }
}
