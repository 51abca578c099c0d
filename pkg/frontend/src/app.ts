/**
 * Portal shell: login (local form plus one button per enabled provider),
 * apparatus catalog with liveness badges and Run buttons, and the experiment
 * page. The catalog refreshes on a slow loop; fetch failures show a retry
 * banner instead of wiping the page.
 */

import { ApiError, PortalApi } from "./api.js";
import type { CatalogEntry, Me, ProtocolEntry } from "./api.js";
import { clear, el } from "./dom.js";
import { ExperimentView } from "./experiment.js";

export const CATALOG_POLL_MS = 10_000;

export class App {
  me: Me | null = null;
  catalog: CatalogEntry[] = [];
  experiment: ExperimentView | null = null;
  private catalogTimer: ReturnType<typeof setInterval> | null = null;

  constructor(
    readonly root: HTMLElement,
    readonly api: PortalApi = new PortalApi(),
  ) {}

  async boot(): Promise<void> {
    this.me = await this.api.me();
    if (this.me === null) {
      await this.renderLogin();
    } else {
      await this.showCatalog();
    }
  }

  // -- login ------------------------------------------------------------------

  async renderLogin(message?: string): Promise<void> {
    this.stopCatalogLoop();
    let providers: string[] = [];
    try {
      providers = await this.api.providers();
    } catch {
      // capability listing is optional; local login still works
    }
    const error = el("p", { class: "form-error" }, message ?? "");
    if (!message) error.setAttribute("hidden", "hidden");

    const username = el("input", { name: "username", autocomplete: "username" });
    const password = el("input", { name: "password", type: "password" });
    const form = el(
      "form",
      { class: "login-form" },
      el("h1", {}, "Remote experiments"),
      el("label", {}, "username ", username),
      el("label", {}, "password ", password),
      el("button", { type: "submit" }, "Login"),
      error,
    );
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.loginLocal(username.value, password.value);
    });

    const providerBox = el("div", { class: "providers" });
    for (const provider of providers) {
      const button = el(
        "button",
        { type: "button", class: "provider", "data-provider": provider },
        `Sign in with ${provider}`,
      );
      button.addEventListener("click", () => this.promptAssertion(provider, providerBox));
      providerBox.append(button);
    }

    clear(this.root).append(el("section", { class: "login" }, form, providerBox));
  }

  private promptAssertion(provider: string, host: HTMLElement): void {
    if (host.querySelector(`[data-assertion="${provider}"]`)) return;
    const area = el("textarea", { "data-assertion": provider, rows: "3" });
    const submit = el("button", { type: "button" }, `Use ${provider} assertion`);
    submit.addEventListener("click", () => {
      void this.api
        .providerLogin(provider, area.value.trim())
        .then((me) => {
          this.me = me;
          return this.showCatalog();
        })
        .catch((err) => this.renderLogin(err instanceof Error ? err.message : String(err)));
    });
    host.append(area, submit);
  }

  private async loginLocal(username: string, password: string): Promise<void> {
    try {
      this.me = await this.api.login(username, password);
    } catch (err) {
      // Auth failures surface inline; the login page stays put.
      const node = this.root.querySelector(".form-error") as HTMLElement | null;
      if (node) {
        node.textContent =
          err instanceof ApiError && err.status === 401
            ? "unknown username or wrong password"
            : String(err instanceof Error ? err.message : err);
        node.removeAttribute("hidden");
      }
      return;
    }
    await this.showCatalog();
  }

  // -- catalog ----------------------------------------------------------------

  async showCatalog(): Promise<void> {
    this.experiment?.stopPolling();
    this.experiment = null;
    try {
      this.catalog = await this.api.catalog();
    } catch {
      this.renderCatalogError();
      return;
    }
    this.renderCatalog();
    this.startCatalogLoop();
  }

  private renderCatalogError(): void {
    const retry = el("button", { type: "button", class: "retry" }, "Retry");
    retry.addEventListener("click", () => void this.showCatalog());
    clear(this.root).append(
      el("section", { class: "catalog" },
        el("p", { class: "banner error" }, "could not load the apparatus list "),
        retry),
    );
  }

  renderCatalog(): void {
    const section = el("section", { class: "catalog" });
    section.append(this.header());
    if (this.catalog.length === 0) {
      section.append(el("p", { class: "empty" }, "No apparatus installed yet."));
    }
    for (const apparatus of this.catalog) {
      section.append(this.apparatusCard(apparatus));
    }
    clear(this.root).append(section);
  }

  private header(): HTMLElement {
    const logout = el("button", { type: "button", class: "logout" }, "Logout");
    logout.addEventListener("click", () => {
      void this.api.logout().then(() => this.renderLogin());
    });
    return el(
      "header",
      {},
      el("h1", {}, "Apparatus"),
      el("span", { class: "whoami" }, this.me ? this.me.username : ""),
      logout,
    );
  }

  private apparatusCard(apparatus: CatalogEntry): HTMLElement {
    const badge = el(
      "span",
      { class: `badge ${apparatus.liveness.toLowerCase()}` },
      apparatus.liveness,
    );
    const card = el(
      "article",
      { class: "apparatus", "data-apparatus": String(apparatus.id) },
      el("h2", {}, apparatus.display_name, " ", badge),
      el("p", { class: "location" }, apparatus.location),
    );
    const list = el("ul", { class: "protocols" });
    for (const protocol of apparatus.protocols) {
      // Run stays enabled even when OFFLINE: submissions queue for later.
      const run = el(
        "button",
        { type: "button", "data-run": String(protocol.id) },
        "Run",
      );
      run.addEventListener("click", () => this.openExperiment(apparatus, protocol));
      list.append(el("li", {}, protocol.display_name, " ", run));
    }
    card.append(list);
    return card;
  }

  openExperiment(apparatus: CatalogEntry, protocol: ProtocolEntry): void {
    this.stopCatalogLoop();
    this.experiment = new ExperimentView(this.api, apparatus, protocol);
    const back = el("button", { type: "button", class: "back" }, "Back to catalog");
    back.addEventListener("click", () => void this.showCatalog());
    clear(this.root).append(back, this.experiment.root);
  }

  private startCatalogLoop(): void {
    this.stopCatalogLoop();
    this.catalogTimer = setInterval(() => {
      void this.api
        .catalog()
        .then((catalog) => {
          this.catalog = catalog;
          if (this.experiment === null) this.renderCatalog();
        })
        .catch(() => undefined);
    }, CATALOG_POLL_MS);
  }

  private stopCatalogLoop(): void {
    if (this.catalogTimer !== null) {
      clearInterval(this.catalogTimer);
      this.catalogTimer = null;
    }
  }
}
