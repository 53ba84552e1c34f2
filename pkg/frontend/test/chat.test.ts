// @vitest-environment happy-dom
import { beforeEach, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { ChatStore } from "../src/store.js";
import { mount } from "../src/view.js";
import { StubServer } from "./stub-server.js";

let server: StubServer;
let store: ChatStore;
let root: HTMLElement;

beforeEach(() => {
  server = new StubServer();
  store = new ChatStore(new ApiClient("http://stub", server.fetch));
  root = document.createElement("div");
  document.body.replaceChildren(root);
  mount(root, store);
});

const type = (text: string) => {
  const input = root.querySelector<HTMLInputElement>(".input")!;
  input.value = text;
  root
    .querySelector(".composer")!
    .dispatchEvent(new Event("submit", { cancelable: true }));
};

const settle = () => new Promise((resolve) => setTimeout(resolve, 0));

describe("chat flow", () => {
  it("first send creates a session implicitly", async () => {
    await store.send("any sci-fi?");
    expect(store.state.sessionId).toBe("s1");
    expect(server.requests[0]).toEqual({ method: "POST", path: "/sessions" });
  });

  it("renders a user and a system bubble per turn", async () => {
    await store.send("any sci-fi?");
    const bubbles = root.querySelectorAll(".bubble");
    expect(bubbles).toHaveLength(2);
    expect(bubbles[0]!.className).toContain("bubble-user");
    expect(bubbles[0]!.textContent).toBe("any sci-fi?");
    expect(bubbles[1]!.className).toContain("bubble-system");
    expect(bubbles[1]!.textContent).toContain("item_4");
  });

  it("shows one card per recommendation with name and probability", async () => {
    await store.send("hi");
    const cards = root.querySelectorAll(".item-card");
    expect(cards).toHaveLength(2);
    expect(cards[0]!.querySelector(".item-name")!.textContent).toBe("item_4");
    expect(cards[0]!.querySelector(".item-prob")!.textContent).toBe("0.610");
    expect((cards[1] as HTMLElement).dataset.itemId).toBe("9");
  });

  it("highlights every slot token in the template", async () => {
    await store.send("hi");
    const slots = root.querySelectorAll(".template .slot");
    expect(slots).toHaveLength(2);
    for (const slot of slots) expect(slot.textContent).toBe("[ITEM]");
    expect(root.querySelector(".template")!.textContent).toBe(
      "you might like [ITEM] or [ITEM]",
    );
  });

  it("marks consistent turns with the ok badge", async () => {
    await store.send("hi");
    const badge = root.querySelector(".badge")!;
    expect(badge.className).toContain("badge-ok");
    expect(badge.textContent).toBe("consistent");
  });

  it("marks inconsistent turns with the warning badge", async () => {
    server.nextInconsistent = true;
    await store.send("hi");
    const badge = root.querySelector(".badge")!;
    expect(badge.className).toContain("badge-warn");
    expect(badge.textContent).toBe("inconsistent");
  });

  it("fills the entity sidebar from server memory", async () => {
    await store.send("hi");
    const entries = root.querySelectorAll(".entities .entity");
    expect([...entries].map((e) => e.textContent)).toEqual(["#4", "#9"]);
  });

  it("disables the input while a turn is pending", async () => {
    const promise = store.send("hi");
    expect(root.querySelector<HTMLInputElement>(".input")!.disabled).toBe(true);
    await promise;
    expect(root.querySelector<HTMLInputElement>(".input")!.disabled).toBe(false);
  });

  it("ignores blank submissions", async () => {
    type("   ");
    await settle();
    expect(server.requests).toHaveLength(0);
    expect(root.querySelectorAll(".bubble")).toHaveLength(0);
  });

  it("submitting the form sends the typed text", async () => {
    type("surprise me");
    await settle();
    expect(root.querySelector(".bubble-user")!.textContent).toBe("surprise me");
  });
});

describe("failure handling", () => {
  it("offers retry after a server error and recovers", async () => {
    await store.send("warmup");
    server.failWith = 500;
    await store.send("flaky");
    expect(root.querySelectorAll(".bubble")).toHaveLength(2);
    const retry = root.querySelector<HTMLButtonElement>(".retry")!;
    expect(retry.hidden).toBe(false);

    server.failWith = null;
    retry.click();
    await settle();
    expect(root.querySelectorAll(".bubble")).toHaveLength(4);
    expect(root.querySelector<HTMLButtonElement>(".retry")!.hidden).toBe(true);
  });

  it("starts over with a notice when the session vanished", async () => {
    await store.send("warmup");
    server.sessions.clear();
    await store.send("hello again");
    expect(store.state.sessionId).toBeNull();
    expect(root.querySelectorAll(".bubble")).toHaveLength(0);
    expect(root.querySelector(".notice")!.textContent).toBe(
      "session expired, started a new one",
    );
  });
});

describe("reset", () => {
  it("clears the view and starts a fresh session, leaving the old one alone", async () => {
    await store.send("hi");
    const oldId = store.state.sessionId!;
    root.querySelector<HTMLButtonElement>(".reset")!.click();
    await settle();

    expect(store.state.sessionId).toBe("s2");
    expect(root.querySelectorAll(".bubble")).toHaveLength(0);
    expect(root.querySelectorAll(".entities .entity")).toHaveLength(0);
    expect(server.sessions.get(oldId)!.history).toHaveLength(2);
  });
});
