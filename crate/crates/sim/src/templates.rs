//! Workflow templates for the synthetic sites.

use hmt_core::memory::{Op, Role};

pub struct ElTpl {
    pub key: &'static str,
    pub role: Role,
    pub text: &'static str,
    pub context: &'static [&'static str],
}

pub struct ActTpl {
    pub el: ElTpl,
    pub op: Op,
    /// Constraint key whose value is typed, for TYPE steps.
    pub arg: Option<&'static str>,
}

pub struct StageTpl {
    pub id: &'static str,
    pub title: &'static str,
    pub heading: &'static str,
    pub actions: &'static [ActTpl],
    pub decoys: &'static [ElTpl],
}

pub struct WorkflowTemplate {
    pub name: &'static str,
    /// Phrasings with `{key}` placeholders; all normalize to one intent.
    pub phrasings: &'static [&'static str],
    pub keys: &'static [&'static str],
    pub stages: &'static [StageTpl],
    pub done_title: &'static str,
    pub done_heading: &'static str,
}

impl WorkflowTemplate {
    pub fn step_count(&self) -> usize {
        self.stages.iter().map(|s| s.actions.len()).sum()
    }
}

const fn el(key: &'static str, role: Role, text: &'static str, context: &'static [&'static str]) -> ElTpl {
    ElTpl { key, role, text, context }
}

const fn click(key: &'static str, role: Role, text: &'static str, context: &'static [&'static str]) -> ActTpl {
    ActTpl { el: el(key, role, text, context), op: Op::Click, arg: None }
}

const fn typed(key: &'static str, text: &'static str, context: &'static [&'static str], arg: &'static str) -> ActTpl {
    ActTpl { el: el(key, Role::Textbox, text, context), op: Op::Type, arg: Some(arg) }
}

use Role::{Button, Checkbox, Generic, Image, Link, Listitem};

pub const CITIES: &[&str] = &[
    "Boston", "Denver", "Seattle", "Chicago", "Miami", "Austin", "Paris", "London", "Madrid", "Toronto", "Dublin",
    "Lisbon",
];
pub const DATES: &[&str] = &["May 3", "June 5", "July 14", "August 9", "September 21", "October 2", "March 18"];
pub const ITEMS: &[&str] = &[
    "Desk Lamp", "Coffee Grinder", "Yoga Mat", "Wireless Mouse", "Water Bottle", "Backpack", "Phone Stand",
    "Floor Fan",
];

pub fn value_pool(key: &str) -> &'static [&'static str] {
    match key {
        "date" => DATES,
        "item" => ITEMS,
        _ => CITIES,
    }
}

pub const FLIGHT: WorkflowTemplate = WorkflowTemplate {
    name: "flight",
    phrasings: &[
        "Book a flight from {origin} to {destination}",
        "I want to fly from {origin} to {destination}",
        "Find me flights from {origin} to {destination}",
    ],
    keys: &["origin", "destination"],
    stages: &[
        StageTpl {
            id: "search",
            title: "Flight search",
            heading: "Search for flights",
            actions: &[
                typed("flight.from", "From city", &["flight search form", "departure"], "origin"),
                typed("flight.to", "To city", &["flight search form", "arrival"], "destination"),
                click("flight.search", Button, "Search flights", &["flight search form"]),
            ],
            decoys: &[
                el("flight.flexible", Checkbox, "Flexible dates", &["flight search form", "options"]),
                el("flight.status", Link, "Flight status", &["top navigation"]),
                el("flight.manage", Link, "Manage booking", &["top navigation"]),
            ],
        },
        StageTpl {
            id: "results",
            title: "Flight results",
            heading: "Flight results",
            actions: &[
                click("flight.nonstop", Checkbox, "Nonstop only", &["results filters"]),
                click("flight.select1", Button, "Select flight", &["results list", "result 1"]),
            ],
            decoys: &[
                el("flight.select2", Button, "Select flight", &["results list", "result 2"]),
                el("flight.select3", Button, "Select flight", &["results list", "result 3"]),
                el("flight.promo", Link, "Best flight deals today", &["promotions"]),
                el("flight.fare1", Listitem, "Morning departure economy fare", &["results list", "result 1"]),
            ],
        },
        StageTpl {
            id: "payment",
            title: "Flight payment",
            heading: "Payment details",
            actions: &[
                click("flight.rules", Checkbox, "Accept fare rules", &["payment form"]),
                click("flight.pay", Button, "Pay now", &["payment form"]),
            ],
            decoys: &[
                el("flight.insure", Button, "Add travel insurance", &["extras"]),
                el("flight.seatmap", Link, "Choose seats later", &["extras"]),
            ],
        },
    ],
    done_title: "Booking confirmed",
    done_heading: "Your flight is booked",
};

pub const HOTEL: WorkflowTemplate = WorkflowTemplate {
    name: "hotel",
    phrasings: &[
        "Reserve a hotel in {city} on {date}",
        "Find a hotel room in {city} on {date}",
        "I need a hotel stay in {city} on {date}",
    ],
    keys: &["city", "date"],
    stages: &[
        StageTpl {
            id: "search",
            title: "Hotel search",
            heading: "Find your stay",
            actions: &[
                typed("hotel.dest", "Destination", &["hotel search form", "where"], "city"),
                typed("hotel.checkin", "Check-in date", &["hotel search form", "when"], "date"),
                click("hotel.search", Button, "Search hotels", &["hotel search form"]),
            ],
            decoys: &[
                el("hotel.guests", Button, "Guests and rooms", &["hotel search form", "guests"]),
                el("hotel.rewards", Link, "Rewards program", &["top navigation"]),
            ],
        },
        StageTpl {
            id: "results",
            title: "Hotel results",
            heading: "Hotels available",
            actions: &[
                click("hotel.sort", Button, "Sort by price", &["results toolbar"]),
                click("hotel.view1", Button, "View hotel", &["hotel list", "hotel 1"]),
            ],
            decoys: &[
                el("hotel.view2", Button, "View hotel", &["hotel list", "hotel 2"]),
                el("hotel.map", Link, "Map view", &["results toolbar"]),
                el("hotel.card1", Listitem, "Harbor view hotel with breakfast", &["hotel list", "hotel 1"]),
            ],
        },
        StageTpl {
            id: "room",
            title: "Room selection",
            heading: "Room options",
            actions: &[
                click("hotel.room1", Button, "Select room", &["room list", "room 1"]),
                click("hotel.reserve", Button, "Reserve now", &["booking summary"]),
            ],
            decoys: &[
                el("hotel.room2", Button, "Select room", &["room list", "room 2"]),
                el("hotel.policies", Link, "Hotel policies", &["footer"]),
            ],
        },
    ],
    done_title: "Reservation complete",
    done_heading: "Your room is reserved",
};

pub const CAR: WorkflowTemplate = WorkflowTemplate {
    name: "car",
    phrasings: &["Rent a car in {city} on {date}", "I need a rental car in {city} on {date}"],
    keys: &["city", "date"],
    stages: &[
        StageTpl {
            id: "search",
            title: "Car rental search",
            heading: "Rent a car",
            actions: &[
                typed("car.location", "Pick-up location", &["car search form", "location"], "city"),
                typed("car.date", "Pick-up date", &["car search form", "date"], "date"),
                click("car.search", Button, "Find cars", &["car search form"]),
            ],
            decoys: &[
                el("car.dropoff", Checkbox, "Return to a different location", &["car search form", "options"]),
                el("car.business", Link, "Business rentals", &["top navigation"]),
            ],
        },
        StageTpl {
            id: "results",
            title: "Available cars",
            heading: "Choose your car",
            actions: &[
                click("car.auto", Checkbox, "Automatic transmission", &["car filters"]),
                click("car.rent1", Button, "Rent this car", &["car list", "car 1"]),
            ],
            decoys: &[
                el("car.rent2", Button, "Rent this car", &["car list", "car 2"]),
                el("car.compare", Link, "Compare models", &["car filters"]),
            ],
        },
        StageTpl {
            id: "extras",
            title: "Rental extras",
            heading: "Protection and extras",
            actions: &[
                click("car.skip", Button, "Skip extras", &["extras panel"]),
                click("car.confirm", Button, "Confirm rental", &["rental summary"]),
            ],
            decoys: &[
                el("car.gps", Checkbox, "Add GPS navigation", &["extras panel"]),
                el("car.terms", Link, "Rental terms", &["footer"]),
            ],
        },
    ],
    done_title: "Rental confirmed",
    done_heading: "Your car is ready",
};

pub const RESTAURANT: WorkflowTemplate = WorkflowTemplate {
    name: "restaurant",
    phrasings: &["Reserve a table in {city} on {date}", "Book dinner in {city} on {date}"],
    keys: &["city", "date"],
    stages: &[
        StageTpl {
            id: "search",
            title: "Restaurant finder",
            heading: "Find a table",
            actions: &[
                typed("dine.area", "City or area", &["restaurant search form", "location"], "city"),
                typed("dine.date", "Reservation date", &["restaurant search form", "date"], "date"),
                click("dine.search", Button, "Find restaurants", &["restaurant search form"]),
            ],
            decoys: &[
                el("dine.party", Button, "Party size", &["restaurant search form", "guests"]),
                el("dine.gift", Link, "Dining gift cards", &["top navigation"]),
            ],
        },
        StageTpl {
            id: "results",
            title: "Restaurant results",
            heading: "Restaurants near you",
            actions: &[
                click("dine.outdoor", Checkbox, "Outdoor seating", &["restaurant filters"]),
                click("dine.book1", Button, "Book a table", &["restaurant list", "restaurant 1"]),
            ],
            decoys: &[
                el("dine.book2", Button, "Book a table", &["restaurant list", "restaurant 2"]),
                el("dine.menu1", Link, "See menu", &["restaurant list", "restaurant 1"]),
            ],
        },
        StageTpl {
            id: "details",
            title: "Reservation details",
            heading: "Confirm your table",
            actions: &[
                click("dine.window", Checkbox, "Window seat", &["seating preferences"]),
                click("dine.confirm", Button, "Confirm reservation", &["reservation summary"]),
            ],
            decoys: &[
                el("dine.note", Link, "Add a special request", &["reservation summary"]),
                el("dine.cancel", Link, "Cancellation policy", &["footer"]),
            ],
        },
    ],
    done_title: "Table reserved",
    done_heading: "See you soon",
};

pub const SHOP: WorkflowTemplate = WorkflowTemplate {
    name: "shop",
    phrasings: &["Shop online for {item}", "Search the store for {item} and buy it"],
    keys: &["item"],
    stages: &[
        StageTpl {
            id: "search",
            title: "Online store",
            heading: "Shop all products",
            actions: &[
                typed("shop.query", "Search products", &["store search bar"], "item"),
                click("shop.search", Button, "Search store", &["store search bar"]),
            ],
            decoys: &[
                el("shop.categories", Link, "All categories", &["store header"]),
                el("shop.sale", Link, "Clearance sale", &["store header"]),
            ],
        },
        StageTpl {
            id: "results",
            title: "Product results",
            heading: "Matching products",
            actions: &[
                click("shop.add1", Button, "Add to cart", &["product grid", "product 1"]),
                click("shop.tocart", Button, "Go to cart", &["cart notice"]),
            ],
            decoys: &[
                el("shop.add2", Button, "Add to cart", &["product grid", "product 2"]),
                el("shop.wish1", Link, "Save to wishlist", &["product grid", "product 1"]),
            ],
        },
        StageTpl {
            id: "checkout",
            title: "Shopping cart",
            heading: "Your cart",
            actions: &[
                click("shop.checkout", Button, "Proceed to checkout", &["cart summary"]),
                click("shop.place", Button, "Place order", &["order summary"]),
            ],
            decoys: &[
                el("shop.coupon", Link, "Apply a coupon", &["cart summary"]),
                el("shop.remove", Button, "Remove", &["cart items"]),
            ],
        },
    ],
    done_title: "Order placed",
    done_heading: "Thanks for your order",
};

pub const RETURN: WorkflowTemplate = WorkflowTemplate {
    name: "return",
    phrasings: &["Request a refund for {item}", "Return my order for {item}"],
    keys: &["item"],
    stages: &[
        StageTpl {
            id: "orders",
            title: "Your orders",
            heading: "Order history",
            actions: &[
                typed("ret.query", "Search orders", &["orders search"], "item"),
                click("ret.find", Button, "Find order", &["orders search"]),
            ],
            decoys: &[
                el("ret.archived", Link, "Archived orders", &["orders header"]),
                el("ret.invoice", Link, "Download invoices", &["orders header"]),
            ],
        },
        StageTpl {
            id: "order",
            title: "Order details",
            heading: "Order summary",
            actions: &[click("ret.start", Button, "Return or refund", &["order actions"])],
            decoys: &[
                el("ret.track", Button, "Track package", &["order actions"]),
                el("ret.again", Button, "Buy it again", &["order actions"]),
            ],
        },
        StageTpl {
            id: "reason",
            title: "Return request",
            heading: "Why are you returning this",
            actions: &[
                click("ret.damaged", Checkbox, "Item arrived damaged", &["return reasons", "reason 1"]),
                click("ret.submit", Button, "Submit return", &["return form"]),
            ],
            decoys: &[
                el("ret.unneeded", Checkbox, "No longer needed", &["return reasons", "reason 2"]),
                el("ret.policy", Link, "Return policy", &["footer"]),
            ],
        },
    ],
    done_title: "Return requested",
    done_heading: "Your return is on its way",
};

pub const TEMPLATES: [&WorkflowTemplate; 6] = [&FLIGHT, &HOTEL, &SHOP, &CAR, &RESTAURANT, &RETURN];

pub fn template(name: &str) -> Option<&'static WorkflowTemplate> {
    TEMPLATES.iter().copied().find(|t| t.name == name)
}

/// Site chrome shared by every page; a seeded subset appears on each page.
pub const CHROME: &[ElTpl] = &[
    el("chrome.home", Link, "Home", &["top navigation"]),
    el("chrome.deals", Link, "Deals", &["top navigation"]),
    el("chrome.signin", Button, "Sign in", &["top navigation"]),
    el("chrome.help", Link, "Help center", &["footer"]),
    el("chrome.taxes", Generic, "Prices include taxes and fees", &["footer"]),
    el("chrome.app", Link, "Get the app", &["footer"]),
];

/// Extra distractors injected into the second site of a pair.
pub const INJECTED: &[ElTpl] = &[
    el("inject.offers", Link, "Special offers", &["promotions"]),
    el("inject.banner", Image, "Summer sale banner", &["promotions"]),
    el("inject.chat", Button, "Chat with us", &["support widget"]),
    el("inject.gift", Link, "Gift cards", &["footer"]),
    el("inject.trust", Generic, "Trusted by millions of customers", &["hero"]),
    el("inject.subscribe", Button, "Subscribe", &["newsletter"]),
    el("inject.email", Role::Textbox, "Email address", &["newsletter"]),
    el("inject.careers", Link, "Careers", &["footer"]),
];
