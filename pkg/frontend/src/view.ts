import { TurnResult } from "./api.js";
import { ChatState, ChatStore } from "./store.js";

const ITEM_SLOT = "[ITEM]";

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Template line with [ITEM] slots wrapped in highlight spans. */
export function renderTemplate(template: string[]): HTMLElement {
  const line = el("div", "template");
  template.forEach((tok, i) => {
    if (i > 0) line.append(" ");
    line.append(
      tok === ITEM_SLOT ? el("span", "slot", tok) : document.createTextNode(tok),
    );
  });
  return line;
}

export function renderDetail(result: TurnResult): HTMLElement {
  const panel = el("div", "detail");
  panel.append(renderTemplate(result.template));

  const badge = el(
    "span",
    result.consistent ? "badge badge-ok" : "badge badge-warn",
    result.consistent ? "consistent" : "inconsistent",
  );
  panel.append(badge);

  const cards = el("div", "cards");
  for (const rec of result.recommendations) {
    const card = el("div", "item-card");
    card.append(el("div", "item-name", rec.name));
    card.append(el("div", "item-prob", rec.probability.toFixed(3)));
    card.dataset.itemId = String(rec.item_id);
    cards.append(card);
  }
  panel.append(cards);
  return panel;
}

export function renderChat(root: HTMLElement, state: ChatState): void {
  const log = root.querySelector(".log")!;
  log.replaceChildren();
  for (const bubble of state.bubbles) {
    const node = el("div", `bubble bubble-${bubble.speaker}`, bubble.text);
    log.append(node);
    if (bubble.result) log.append(renderDetail(bubble.result));
  }

  const sidebar = root.querySelector(".entities")!;
  sidebar.replaceChildren();
  for (const eid of state.entityMemory) {
    sidebar.append(el("li", "entity", `#${eid}`));
  }

  const input = root.querySelector<HTMLInputElement>(".input")!;
  input.disabled = state.pending;

  const retry = root.querySelector<HTMLButtonElement>(".retry")!;
  retry.hidden = state.failed === null;

  const notice = root.querySelector(".notice")!;
  notice.textContent = state.notice ?? "";
}

export function mount(root: HTMLElement, store: ChatStore): void {
  root.innerHTML = `
    <div class="notice"></div>
    <ul class="entities"></ul>
    <div class="log"></div>
    <form class="composer">
      <input class="input" type="text" autocomplete="off" />
      <button class="send" type="submit">send</button>
      <button class="retry" type="button" hidden>retry</button>
      <button class="reset" type="button">reset</button>
    </form>
  `;
  const input = root.querySelector<HTMLInputElement>(".input")!;
  root.querySelector(".composer")!.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const text = input.value;
    input.value = "";
    void store.send(text);
  });
  root.querySelector(".retry")!.addEventListener("click", () => void store.retry());
  root.querySelector(".reset")!.addEventListener("click", () => void store.reset());
  store.subscribe((state) => renderChat(root, state));
}
