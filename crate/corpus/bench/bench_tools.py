def query_book_genre(book: str):
    """Look up the genre of a book by title."""
    return [{"status": "success", "msg": "genre found"}, {"arg": "genre", "value": "science fiction"}]


def find_bestsellers(genre: str, limit: int = 3):
    """Best-selling books of a genre."""
    return [{"status": "success", "msg": "bestsellers listed"},
            {"arg": "books", "value": ["Dune", "Foundation", "Hyperion"][:limit]}]


def place_order(ordered_book: list):
    """Place an order for the selected books."""
    return [{"status": "success", "msg": "order created"}, {"bot": "Your order has been placed."}]
