import { defineConfig } from "vite";
import react from "@vitejs/plugin-react";

// dev server proxies /api to a locally running `cardiokit serve`
export default defineConfig({
  plugins: [react()],
  server: {
    proxy: {
      "/api": "http://127.0.0.1:8000",
    },
  },
});
