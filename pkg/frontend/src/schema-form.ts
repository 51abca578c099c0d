/**
 * Form generation from a protocol config schema, mirroring the server-side
 * validator exactly: same field set, same bounds, same error messages. A pure
 * function of the schema, so the same schema always yields the same form.
 */

import type { ConfigSchema } from "./api.js";

export interface FormField {
  name: string;
  default?: number;
  minimum?: number;
  maximum?: number;
  multipleOf?: number;
}

/**
 * Extract bounded integer fields from a schema. Returns null when there is no
 * schema at all (the protocol takes free-form configuration text); returns []
 * for an empty schema (no parameters needed).
 */
export function schemaFields(schema: ConfigSchema | null | undefined): FormField[] | null {
  if (schema === null || schema === undefined) return null;
  const properties = schema.properties ?? {};
  const fields: FormField[] = [];
  for (const [name, prop] of Object.entries(properties)) {
    const field: FormField = { name };
    if (prop.default !== undefined) field.default = prop.default;
    if (prop.minimum !== undefined) field.minimum = prop.minimum;
    if (prop.maximum !== undefined) field.maximum = prop.maximum;
    if (prop.multipleOf !== undefined) field.multipleOf = prop.multipleOf;
    fields.push(field);
  }
  return fields;
}

export function defaultValues(fields: FormField[]): Record<string, string> {
  const values: Record<string, string> = {};
  for (const field of fields) {
    values[field.name] = field.default !== undefined ? String(field.default) : "";
  }
  return values;
}

/** Validate one raw input; messages match the server's word for word. */
export function fieldError(field: FormField, raw: string): string | null {
  const text = raw.trim();
  if (!/^-?\d+$/.test(text)) return "expected integer";
  const value = Number(text);
  if (field.minimum !== undefined && value < field.minimum) {
    return `below minimum ${field.minimum}`;
  }
  if (field.maximum !== undefined && value > field.maximum) {
    return `above maximum ${field.maximum}`;
  }
  if (field.multipleOf !== undefined && value % field.multipleOf !== 0) {
    return `not a multiple of ${field.multipleOf}`;
  }
  return null;
}

/** Map of field name to error message; empty when the form may be submitted. */
export function validateValues(
  fields: FormField[],
  values: Record<string, string>,
): Record<string, string> {
  const errors: Record<string, string> = {};
  for (const field of fields) {
    const error = fieldError(field, values[field.name] ?? "");
    if (error) errors[field.name] = error;
  }
  return errors;
}

/** Serialize form values to the exact JSON text the apparatus will receive. */
export function buildPayload(fields: FormField[], values: Record<string, string>): string {
  const payload: Record<string, number> = {};
  for (const field of fields) {
    payload[field.name] = Number((values[field.name] ?? "").trim());
  }
  return JSON.stringify(payload);
}
