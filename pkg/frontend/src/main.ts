/**
 * Browser entry point. The service base URL defaults to same-origin and
 * can be overridden with ?api=<url> or a window.WHATIF_API_BASE global.
 */

import { ApiClient } from './api.js';
import { initApp } from './app.js';

declare global {
  interface Window {
    WHATIF_API_BASE?: string;
  }
}

const resolveBaseUrl = (): string => {
  const fromQuery = new URLSearchParams(window.location.search).get('api');
  if (fromQuery) return fromQuery.replace(/\/$/, '');
  if (window.WHATIF_API_BASE) return window.WHATIF_API_BASE.replace(/\/$/, '');
  return '';
};

const root = document.getElementById('app');
if (root) {
  const app = initApp(root, new ApiClient(resolveBaseUrl()));
  void app.start();
}
