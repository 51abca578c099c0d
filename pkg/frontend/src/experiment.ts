/**
 * The experiment page: three tabs (description, configuration, results).
 *
 * The configuration form is generated from the protocol's config schema —
 * bounded numeric inputs with sliders, defaults prefilled, and client-side
 * checks mirroring the server validator. Save stores a draft; Reset restores
 * the schema defaults; Start submits and switches to the results tab, where a
 * 1 s cursor poll feeds the table and plot until the run reaches a terminal
 * state. Download fetches the CSV document the server renders.
 */

import { PortalApi, ValidationError } from "./api.js";
import type { CatalogEntry, ProtocolEntry } from "./api.js";
import { clear, el } from "./dom.js";
import { renderPlot } from "./plot.js";
import { ResultBuffer } from "./results.js";
import {
  buildPayload,
  defaultValues,
  schemaFields,
  validateValues,
} from "./schema-form.js";
import type { FormField } from "./schema-form.js";

const TERMINAL = new Set(["FINISHED", "ABORTED", "ERROR"]);
export const RESULT_POLL_MS = 1000;

export class ExperimentView {
  readonly root: HTMLElement;
  readonly fields: FormField[] | null;
  values: Record<string, string>;
  rawConfig: string;
  executionId: number | null = null;
  status = "DRAFT";
  buffer = new ResultBuffer();
  lastDownload: string | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;
  private tabs: Record<string, HTMLElement> = {};
  private panels: Record<string, HTMLElement> = {};

  constructor(
    private api: PortalApi,
    private apparatus: CatalogEntry,
    private protocol: ProtocolEntry,
  ) {
    this.fields = schemaFields(protocol.config_schema);
    this.values = this.fields ? defaultValues(this.fields) : {};
    this.rawConfig = "{}";
    this.root = el("section", { class: "experiment" });
    this.render();
  }

  // -- layout ---------------------------------------------------------------

  private render(): void {
    clear(this.root);
    this.root.append(
      el(
        "h2",
        {},
        `${this.protocol.display_name} — ${this.apparatus.display_name}` +
          ` (${this.apparatus.location})`,
      ),
    );
    const nav = el("nav", { class: "tabs", role: "tablist" });
    const body = el("div", { class: "tab-panels" });
    for (const name of ["description", "configuration", "results"] as const) {
      const tab = el("button", { class: "tab", "data-tab": name, role: "tab" }, name);
      tab.addEventListener("click", () => this.showTab(name));
      nav.append(tab);
      const panel = el("div", { class: "panel", "data-panel": name });
      body.append(panel);
      this.tabs[name] = tab;
      this.panels[name] = panel;
    }
    this.root.append(nav, body);
    this.renderDescription();
    this.renderConfiguration();
    this.renderResults();
    this.showTab("description");
  }

  showTab(name: string): void {
    for (const [key, tab] of Object.entries(this.tabs)) {
      tab.classList.toggle("active", key === name);
      this.panels[key].classList.toggle("active", key === name);
    }
  }

  private renderDescription(): void {
    const panel = clear(this.panels.description);
    const text =
      this.protocol.description.en ||
      this.apparatus.description.en ||
      "No description provided.";
    panel.append(el("p", { class: "description" }, text));
  }

  // -- configuration tab -----------------------------------------------------

  private renderConfiguration(): void {
    const panel = clear(this.panels.configuration);
    const form = el("form", { class: "config-form" });
    form.addEventListener("submit", (event) => event.preventDefault());

    if (this.fields === null) {
      const area = el("textarea", { name: "raw-config", rows: "6" });
      area.value = this.rawConfig;
      area.addEventListener("input", () => {
        this.rawConfig = area.value;
      });
      form.append(el("label", {}, "configuration payload", area));
    } else {
      for (const field of this.fields) {
        form.append(this.numericInput(field));
      }
    }

    const errorLine = el("p", { class: "form-error", hidden: "hidden" });
    const save = el("button", { type: "button", "data-action": "save" }, "Save");
    const reset = el("button", { type: "button", "data-action": "reset" }, "Reset");
    const start = el("button", { type: "button", "data-action": "start" }, "Start");
    save.addEventListener("click", () => void this.save(errorLine));
    reset.addEventListener("click", () => this.reset());
    start.addEventListener("click", () => void this.start(errorLine));
    form.append(el("div", { class: "buttons" }, save, reset, start), errorLine);
    panel.append(form);
  }

  private numericInput(field: FormField): HTMLElement {
    const attrs: Record<string, string> = {
      type: "number",
      name: field.name,
      value: this.values[field.name] ?? "",
    };
    const sliderAttrs: Record<string, string> = {
      type: "range",
      "data-slider": field.name,
      value: this.values[field.name] ?? "0",
    };
    if (field.minimum !== undefined) {
      attrs.min = String(field.minimum);
      sliderAttrs.min = String(field.minimum);
    }
    if (field.maximum !== undefined) {
      attrs.max = String(field.maximum);
      sliderAttrs.max = String(field.maximum);
    }
    if (field.multipleOf !== undefined) {
      attrs.step = String(field.multipleOf);
      sliderAttrs.step = String(field.multipleOf);
    }
    const input = el("input", attrs);
    const slider = el("input", sliderAttrs);
    const error = el("span", { class: "field-error", "data-error-for": field.name });
    const sync = (value: string) => {
      this.values[field.name] = value;
      input.value = value;
      slider.value = value;
      this.validateInto(error, field);
    };
    input.addEventListener("input", () => sync(input.value));
    slider.addEventListener("input", () => sync(slider.value));
    return el(
      "label",
      { class: "field", "data-field": field.name },
      `${field.name} `,
      input,
      slider,
      error,
    );
  }

  private validateInto(node: HTMLElement, field: FormField): void {
    const errors = validateValues([field], this.values);
    node.textContent = errors[field.name] ?? "";
  }

  private configText(): string {
    return this.fields === null ? this.rawConfig : buildPayload(this.fields, this.values);
  }

  /** Client-side gate mirroring the server validator; true when clean. */
  validate(): boolean {
    if (this.fields === null) return true;
    const errors = validateValues(this.fields, this.values);
    for (const field of this.fields) {
      const node = this.root.querySelector(`[data-error-for="${field.name}"]`);
      if (node) node.textContent = errors[field.name] ?? "";
    }
    return Object.keys(errors).length === 0;
  }

  reset(): void {
    if (this.fields) this.values = defaultValues(this.fields);
    this.rawConfig = "{}";
    this.renderConfiguration();
  }

  async save(errorLine?: HTMLElement): Promise<void> {
    if (!this.validate()) return;
    try {
      const execution =
        this.executionId === null
          ? await this.api.createExecution(
              this.apparatus.id,
              this.protocol.id,
              this.configText(),
            )
          : await this.api.updateExecution(this.executionId, this.configText());
      this.executionId = execution.id;
      this.status = execution.status;
      if (errorLine) errorLine.setAttribute("hidden", "hidden");
    } catch (err) {
      this.reportFormError(err, errorLine);
    }
  }

  async start(errorLine?: HTMLElement): Promise<void> {
    if (!this.validate()) return; // out-of-range values never leave the browser
    try {
      if (this.executionId === null) await this.save(errorLine);
      if (this.executionId === null) return;
      const execution = await this.api.start(this.executionId);
      this.status = execution.status;
      this.showTab("results");
      this.startPolling();
    } catch (err) {
      this.reportFormError(err, errorLine);
    }
  }

  private reportFormError(err: unknown, errorLine?: HTMLElement): void {
    if (err instanceof ValidationError) {
      for (const issue of err.issues) {
        const node = this.root.querySelector(`[data-error-for="${issue.field}"]`);
        if (node) node.textContent = issue.message;
      }
      return;
    }
    if (errorLine) {
      errorLine.textContent = err instanceof Error ? err.message : String(err);
      errorLine.removeAttribute("hidden");
    }
  }

  // -- results tab -------------------------------------------------------------

  private renderResults(): void {
    const panel = clear(this.panels.results);
    const download = el(
      "button",
      { type: "button", "data-action": "download-csv" },
      "Download CSV",
    );
    download.addEventListener("click", () => void this.downloadCsv());
    panel.append(
      el("p", { class: "status-line" }, "status: ", el("span", { class: "status" }, this.status)),
      download,
    );
    if (this.apparatus.stream_url) {
      // Small live-view window next to the incoming data.
      panel.append(
        el("iframe", {
          class: "stream",
          src: this.apparatus.stream_url,
          title: "live stream",
        }),
      );
    }
    panel.append(
      el("div", { class: "plot-host" }),
      el("div", { class: "table-host" }),
      el("p", { class: "final-line", hidden: "hidden" }),
    );
    this.paintResults();
  }

  private paintResults(): void {
    const panel = this.panels.results;
    const statusNode = panel.querySelector(".status");
    if (statusNode) statusNode.textContent = this.status;

    const columns = this.buffer.columns();
    const parsed = this.buffer.parsed();
    const table = el("table", { class: "results" });
    const head = el("tr", {});
    for (const column of ["seq", "kind", ...columns]) {
      head.append(el("th", {}, column));
    }
    table.append(head);
    this.buffer.rows.forEach((row, i) => {
      if (row.kind !== "PARTIAL") return; // the FINAL summary gets its own line
      const tr = el("tr", { "data-seq": String(row.seq) });
      tr.append(el("td", {}, String(row.seq)), el("td", {}, row.kind));
      const obj = parsed[i];
      for (const column of columns) {
        const value = obj?.[column];
        tr.append(el("td", {}, value === undefined || value === null ? "" : String(value)));
      }
      if (!obj) tr.append(el("td", { class: "raw" }, row.payload));
      table.append(tr);
    });
    const tableHost = panel.querySelector(".table-host");
    if (tableHost) {
      tableHost.replaceChildren(table);
    }
    const plotHost = panel.querySelector(".plot-host");
    if (plotHost) {
      plotHost.innerHTML = renderPlot(this.buffer.series());
    }
    const finalLine = panel.querySelector(".final-line") as HTMLElement | null;
    const finalRow = this.buffer.finalRow();
    if (finalLine && finalRow) {
      finalLine.textContent =
        this.status === "ERROR" ? `error: ${finalRow.payload}` : `final: ${finalRow.payload}`;
      finalLine.removeAttribute("hidden");
    }
  }

  /**
   * One polling step: fetch results past the cursor, append, repaint, and
   * report whether polling should continue. The 1 s loop wraps this.
   */
  async pollOnce(): Promise<boolean> {
    if (this.executionId === null) return false;
    try {
      this.status = await this.api.status(this.executionId);
      const batch = await this.api.resultsAfter(this.executionId, this.buffer.lastSeq);
      this.buffer.append(batch);
      this.paintResults();
    } catch {
      return true; // transient fetch problem: keep polling
    }
    return !TERMINAL.has(this.status);
  }

  startPolling(): void {
    this.stopPolling();
    this.timer = setInterval(() => {
      void this.pollOnce().then((keep) => {
        if (!keep) this.stopPolling();
      });
    }, RESULT_POLL_MS);
  }

  stopPolling(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  async downloadCsv(): Promise<string | null> {
    if (this.executionId === null) return null;
    const document_ = await this.api.downloadCsv(this.executionId);
    this.lastDownload = document_;
    this.offerDownload(document_);
    return document_;
  }

  private offerDownload(content: string): void {
    // Browser-only affordance; test environments read lastDownload instead.
    try {
      const url = URL.createObjectURL(new Blob([content], { type: "text/csv" }));
      const anchor = el("a", { href: url, download: `execution-${this.executionId}.csv` });
      anchor.click();
      URL.revokeObjectURL(url);
    } catch {
      // jsdom has no object URLs; the fetched document is kept on lastDownload
    }
  }
}
