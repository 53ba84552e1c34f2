import { ApiClient } from "./api.js";
import { ChatStore } from "./store.js";
import { mount } from "./view.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? "http://localhost:8000";

const store = new ChatStore(new ApiClient(baseUrl));
mount(document.getElementById("app")!, store);
