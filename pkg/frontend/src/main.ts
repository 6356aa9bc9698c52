/** Browser entry: boot against the page URL. Kept out of app.ts so tests can
 * import the controller without import-time side effects. */
import { boot } from './app.js';

boot(document, window.location);
